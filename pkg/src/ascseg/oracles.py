"""Brute-force reference computations used by the test-suite and ``selftest``.

Each one is written from the defining formula and shares no code with the
implementation it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def naive_dft3(v) -> np.ndarray:
    """Direct O(n^6) evaluation of the 3D DFT sum."""
    v = np.asarray(v, dtype=np.complex128)
    D, H, W = v.shape
    out = np.zeros(v.shape, dtype=np.complex128)
    for u in itertools.product(range(D), range(H), range(W)):
        acc = 0j
        for x in itertools.product(range(D), range(H), range(W)):
            angle = -2 * math.pi * (u[0] * x[0] / D + u[1] * x[1] / H + u[2] * x[2] / W)
            acc += v[x] * complex(math.cos(angle), math.sin(angle))
        out[u] = acc
    return out


def scalar_adam(x0: float, grad_fn, lr: float, steps: int, b1=0.9, b2=0.999, eps=1e-8) -> list[float]:
    """Scalar Adam trajectory written out term by term."""
    x, m, v = x0, 0.0, 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(x)
    return path


def loop_mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    return total / len(a)


def loop_dice_loss(P, Y, eps: float = 1e-5) -> float:
    """Single-map class-mean soft dice loss by explicit loops."""
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    C = P.shape[0]
    total = 0.0
    for c in range(C):
        inter = sp = sy = 0.0
        for p, y in zip(P[c].ravel(), Y[c].ravel()):
            inter += p * y
            sp += p
            sy += y
        total += (2 * inter + eps) / (sp + sy + eps)
    return 1.0 - total / C


def count_mask(dims, beta: float) -> int:
    """Count frequency bins whose centered coordinates all lie within floor(beta*n)."""
    count = 0
    halves = [math.floor(beta * n + 1e-9) for n in dims]
    for u in itertools.product(*(range(n) for n in dims)):
        ok = True
        for uk, n, h in zip(u, dims, halves):
            c = uk if uk <= n / 2 else uk - n
            if abs(c) > h:
                ok = False
                break
        count += ok
    return count
