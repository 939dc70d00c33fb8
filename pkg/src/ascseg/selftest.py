"""Quick built-in numerical checks run by ``ascseg selftest``."""
from __future__ import annotations

import numpy as np

from . import losses, oracles
from .fourier import fft3, ifft3
from .gradcheck import check_gradient, relu_pattern
from .model import NetConfig, backward, forward, init_params
from .perturb import REALIZED_BOUNDS, sample_cuboid
from .sched import ema_update


def fft_roundtrip(n_volumes: int = 10, size: int = 32) -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(n_volumes):
        v = rng.standard_normal((size,) * 3)
        back, _ = ifft3(fft3(v))
        worst = max(worst, float(np.abs(back - v).max()))
    return worst < 1e-5, f"max err {worst:.2e}"


def dft_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    worst = 0.0
    for dims in [(2, 3, 4), (4, 4, 4), (3, 1, 2), (1, 1, 1)]:
        v = rng.standard_normal(dims)
        worst = max(worst, float(np.abs(fft3(v) - oracles.naive_dft3(v)).max()))
    return worst < 1e-8, f"max err {worst:.2e}"


def gradient_check() -> tuple[bool, str]:
    cfg = NetConfig(hidden=2, classes=2, seed=3)
    rng = np.random.default_rng(3)
    p = init_params(cfg).astype(np.float64) + 0.05 * rng.standard_normal(cfg.n_params)
    v = rng.standard_normal((4, 4, 4))
    y = np.zeros((2, 4, 4, 4))
    y[0, :2] = 1
    y[1, 2:] = 1

    def loss(q):
        return losses.soft_dice_loss(forward(q, v, cfg)[0], y).value

    probs, cache = forward(p, v, cfg)
    analytic = backward(p, cache, losses.soft_dice_loss(probs, y).grads[0])
    res = check_gradient(p, loss, analytic, pattern_fn=lambda q: relu_pattern(q, [v], cfg))
    return res.max_rel < 1e-3, f"max rel {res.max_rel:.2e}"


def mask_fraction(n: int = 2000) -> tuple[bool, str]:
    rng = np.random.default_rng(4)
    lo, hi = REALIZED_BOUNDS
    fr = [sample_cuboid((24, 24, 24), rng).fraction for _ in range(n)]
    return lo <= min(fr) and max(fr) <= hi, f"fraction range [{min(fr):.3f}, {max(fr):.3f}]"


def ema_contraction(alpha: float = 0.99, steps: int = 10) -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    student = rng.standard_normal(100)
    teacher = rng.standard_normal(100)
    d0 = np.linalg.norm(teacher - student)
    worst = 0.0
    for k in range(1, steps + 1):
        teacher = ema_update(teacher, student, alpha)
        ratio = np.linalg.norm(teacher - student) / (d0 * alpha**k)
        worst = max(worst, abs(ratio - 1))
    return worst < 1e-6, f"max rel dev {worst:.1e}"


SUITES = [
    ("fft-roundtrip", fft_roundtrip),
    ("dft-oracle", dft_oracle),
    ("gradient-check", gradient_check),
    ("mask-fraction", mask_fraction),
    ("ema-contraction", ema_contraction),
]


def run_all() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in SUITES:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
