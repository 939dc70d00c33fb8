"""Loss terms with gradients w.r.t. the student probability maps.

Every function accepts a single ``(C, D, H, W)`` map or a batch
``(N, C, D, H, W)``; batch losses are means over items.  Teacher outputs and
pseudo labels are constants: they never receive a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DICE_EPS = 1e-5


@dataclass
class LossValue:
    value: float
    grads: tuple[np.ndarray, ...]


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (4, 5):
        raise ValueError(f"expected (C, D, H, W) or (N, C, D, H, W), got {a.shape}")


def soft_dice_loss(P, Y) -> LossValue:
    """Class-mean soft dice loss, background included, smoothing 1e-5.

    ``1 - mean_c (2 sum(P_c Y_c) + eps) / (sum P_c + sum Y_c + eps)``
    """
    P = np.asarray(P, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    _check_pair(P, Y)
    single = P.ndim == 4
    if single:
        P, Y = P[None], Y[None]
    n, c = P.shape[:2]
    axes = (2, 3, 4)
    inter = (P * Y).sum(axis=axes)
    denom = P.sum(axis=axes) + Y.sum(axis=axes) + DICE_EPS
    num = 2 * inter + DICE_EPS
    value = float(np.mean(1.0 - (num / denom).mean(axis=1)))
    # d/dP of num/denom is (2Y*denom - num) / denom^2
    ratio_grad = (2 * Y * denom[..., None, None, None] - num[..., None, None, None]) / (
        denom[..., None, None, None] ** 2
    )
    grad = -ratio_grad / (c * n)
    return LossValue(value, (grad[0] if single else grad,))


def mse_consistency(Ps, Pt) -> LossValue:
    """Mean squared difference over every element; ``Pt`` is held constant."""
    Ps = np.asarray(Ps, dtype=np.float64)
    Pt = np.asarray(Pt, dtype=np.float64)
    _check_pair(Ps, Pt)
    diff = Ps - Pt
    return LossValue(float(np.mean(diff * diff)), (2.0 * diff / diff.size,))


def seg_loss(P_s, P_sft, Y_s) -> LossValue:
    a = soft_dice_loss(P_s, Y_s)
    b = soft_dice_loss(P_sft, Y_s)
    return LossValue(a.value + b.value, a.grads + b.grads)


def appearance_consistency(f_xt, f_xtfs, ft_xt, ft_xtfs, *, use_xt: bool = True, use_xtfs: bool = True) -> LossValue:
    """Dual cross-view consistency between student and teacher.

    ``||f(X_t) - f'(X_tfs)||^2 + ||f(X_tfs) - f'(X_t)||^2``.  Either term can
    be switched off; a disabled term contributes zero value and zero gradient.
    """
    value = 0.0
    g_xt = np.zeros(np.shape(f_xt))
    g_xtfs = np.zeros(np.shape(f_xtfs))
    if use_xt:
        term = mse_consistency(f_xt, ft_xtfs)
        value += term.value
        g_xt = term.grads[0]
    if use_xtfs:
        term = mse_consistency(f_xtfs, ft_xt)
        value += term.value
        g_xtfs = term.grads[0]
    return LossValue(value, (g_xt, g_xtfs))


def structure_consistency(f_xt_sp, f_xtfs_sp, pseudo_t, pseudo_tfs) -> LossValue:
    """Consistency of student predictions on blended inputs with blended teacher targets.

    ``pseudo_t`` is the blend of teacher outputs on the X_tfs views and is the
    target for the student on the blended X_t; ``pseudo_tfs`` the reverse.
    """
    a = mse_consistency(f_xt_sp, pseudo_t)
    b = mse_consistency(f_xtfs_sp, pseudo_tfs)
    return LossValue(a.value + b.value, a.grads + b.grads)


def total_loss(l_seg: LossValue, l_app: LossValue | None, l_str: LossValue | None, lam: float) -> LossValue:
    """``L_seg + lam * (L_app + L_str)``; ``None`` terms count as zero.

    Gradients are concatenated in argument order, consistency ones scaled by ``lam``.
    """
    value = l_seg.value
    grads = list(l_seg.grads)
    for term in (l_app, l_str):
        if term is None:
            continue
        value += lam * term.value
        grads.extend(lam * g for g in term.grads)
    return LossValue(value, tuple(grads))
