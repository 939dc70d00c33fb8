"""Adam, poly learning-rate decay, consistency-weight ramp-up and EMA teacher update."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ScheduleConfig:
    lr_init: float = 1e-4
    poly_power: float = 0.9
    epochs_total: int = 100
    gamma: float = 200.0
    t_max: int = 1
    ema_alpha: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ValueError(f"ema_alpha must lie in [0, 1), got {self.ema_alpha}")
        if self.gamma <= 0 or self.poly_power <= 0:
            raise ValueError("gamma and poly_power must be positive")
        if self.epochs_total < 1 or self.t_max < 1:
            raise ValueError("epochs_total and t_max must be positive")


def poly_lr(epoch: int, cfg: ScheduleConfig) -> float:
    return cfg.lr_init * (1.0 - epoch / cfg.epochs_total) ** cfg.poly_power


def ramp_lambda(t: int, cfg: ScheduleConfig) -> float:
    """Gaussian ramp-up ``gamma * exp(-5 (1 - t/t_max)^2)``."""
    return cfg.gamma * math.exp(-5.0 * (1.0 - t / cfg.t_max) ** 2)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; moments are accumulated in float64.

    Returns new parameters (same dtype as ``params``) and a new state.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError(f"length mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = params.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new.astype(params.dtype), AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def ema_update(teacher: np.ndarray, student: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * teacher + (1 - alpha) * student``, element-wise."""
    teacher = np.asarray(teacher)
    if teacher.shape != np.shape(student):
        raise ValueError("teacher/student length mismatch")
    out = alpha * teacher.astype(np.float64) + (1.0 - alpha) * np.asarray(student, dtype=np.float64)
    return out.astype(teacher.dtype)
