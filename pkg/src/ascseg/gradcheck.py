"""Finite-difference verification of the hand-written backward pass.

Central differences are only a valid oracle where the loss is smooth over
``[p - eps, p + eps]``.  With ReLU activations a step can straddle a kink; for
those coordinates the step is shrunk until the activation pattern is constant
across the stencil.  Likewise where the curvature makes the quotient at the
nominal step inaccurate relative to a tiny gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NetConfig, forward


def relu_pattern(p: np.ndarray, volumes, cfg: NetConfig) -> np.ndarray:
    """Concatenated on/off pattern of every ReLU for the given inputs."""
    parts = []
    for v in volumes:
        _, cache = forward(p, v, cfg)
        parts.append(cache.z1.ravel() > 0)
        parts.append(cache.z2.ravel() > 0)
    return np.concatenate(parts)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    steps: np.ndarray
    rel: np.ndarray

    @property
    def max_rel(self) -> float:
        return float(self.rel.max())

    @property
    def n_shrunk(self) -> int:
        return int((self.steps < self.steps.max()).sum())


def check_gradient(
    p,
    loss_fn,
    analytic,
    pattern_fn=None,
    eps: float = 1e-3,
    min_eps: float = 1e-6,
    floor: float = 1e-6,
    converge_tol: float | None = 1e-4,
) -> GradCheck:
    """Compare ``analytic`` with central differences of ``loss_fn(p)`` in float64.

    Every coordinate starts at step ``eps``.  The step is divided by 10 while
    the stencil crosses a ReLU kink, or (with ``converge_tol``) while the
    estimate at ``h`` and ``h/10`` still disagree by more than
    ``converge_tol`` relative, i.e. the difference quotient itself has not
    converged.  Step selection never looks at ``analytic``.
    """
    p = np.asarray(p, dtype=np.float64).copy()
    numeric = np.zeros_like(p)
    steps = np.full(p.size, eps)
    base = pattern_fn(p) if pattern_fn is not None else None

    def stencil(i, h):
        orig = p[i]
        p[i] = orig + h
        up = loss_fn(p)
        smooth = base is None or np.array_equal(pattern_fn(p), base)
        p[i] = orig - h
        down = loss_fn(p)
        smooth = smooth and (base is None or np.array_equal(pattern_fn(p), base))
        p[i] = orig
        return (up - down) / (2 * h), smooth

    for i in range(p.size):
        h = eps
        est, smooth = stencil(i, h)
        while h / 10 >= min_eps:
            if smooth:
                if converge_tol is None:
                    break
                finer, finer_smooth = stencil(i, h / 10)
                if finer_smooth and abs(est - finer) <= converge_tol * max(abs(finer), floor):
                    break
                h, est, smooth = h / 10, finer, finer_smooth
            else:
                h /= 10
                est, smooth = stencil(i, h)
        numeric[i] = est
        steps[i] = h
    analytic = np.asarray(analytic, dtype=np.float64)
    return GradCheck(analytic, numeric, steps, rel_error(analytic, numeric, floor))
