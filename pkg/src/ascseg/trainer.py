"""Teacher-student training loop with appearance and structure consistency.

Ablation modes follow the component ladder:

====  =========  ===========  ==============  ================  =========
mode  seg(X_s)   seg(X_sft)   app(f(X_t))     app(f(X_tfs))     structure
====  =========  ===========  ==============  ================  =========
M1    yes
M2    yes        yes
M3    yes        yes          yes
M4    yes        yes          yes             yes
M5    yes        yes          yes             yes               yes
====  =========  ===========  ==============  ================  =========
"""
from __future__ import annotations

import csv
import io
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses, metrics
from .fourier import amplitude_swap
from .model import NetConfig, backward, forward, init_params, save_params
from .perturb import CuboidMask, blend, pseudo_label, sample_cuboid
from .sched import AdamState, ScheduleConfig, adam_step, ema_update, poly_lr, ramp_lambda
from .volume import as_labels, one_hot, znormalize

log = logging.getLogger(__name__)

MODES = ("M1", "M2", "M3", "M4", "M5")
LOG_FIELDS = ("step", "epoch", "lr", "lambda", "l_seg", "l_app", "l_str", "l_total")
N_SOURCE_PER_BATCH = 2
N_TARGET_PER_BATCH = 2


class NumericalError(FloatingPointError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class Flags:
    seg_sft: bool
    app_xt: bool
    app_xtfs: bool
    structure: bool

    @classmethod
    def for_mode(cls, mode: str) -> "Flags":
        if mode not in MODES:
            raise ValueError(f"unknown ablation mode {mode!r}; expected one of {MODES}")
        level = MODES.index(mode) + 1
        return cls(level >= 2, level >= 3, level >= 4, level >= 5)

    @property
    def uses_teacher(self) -> bool:
        return self.app_xt or self.app_xtfs or self.structure


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.1
    batch: int = 4
    epochs: int = 100
    lr: float = 1e-4
    poly_power: float = 0.9
    gamma: float = 200.0
    alpha: float = 0.99
    seed: int = 0
    ablation: str = "M5"
    hidden: int = 8
    classes: int = 4
    deterministic: bool = True
    ckpt_every: int = 0

    def __post_init__(self):
        if self.batch != N_SOURCE_PER_BATCH + N_TARGET_PER_BATCH:
            raise ValueError("batch must be 4 (2 source + 2 target)")
        Flags.for_mode(self.ablation)
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")

    def net_config(self) -> NetConfig:
        return NetConfig(hidden=self.hidden, classes=self.classes, seed=self.seed)

    def schedule(self, steps_per_epoch: int) -> ScheduleConfig:
        return ScheduleConfig(
            lr_init=self.lr,
            poly_power=self.poly_power,
            epochs_total=self.epochs,
            gamma=self.gamma,
            t_max=self.epochs * steps_per_epoch,
            ema_alpha=self.alpha,
        )


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    masks: list[tuple[int, int, CuboidMask]] = field(default_factory=list)
    eval_dsc: list[tuple[int, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in self.records:
            w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[2:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class Batch:
    """Views built for one iteration; every array is a stack over batch items."""

    xs: np.ndarray
    ys: np.ndarray  # one-hot, (N, C, D, H, W)
    xsft: np.ndarray
    xt: np.ndarray
    xtfs: np.ndarray
    masks: list[CuboidMask]
    partners: list[int]


def _deterministic_context(deterministic: bool):
    if not deterministic:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(1)


def steps_per_epoch(n_source: int, n_target: int) -> int:
    """One pass over the larger set, two samples per domain per step."""
    return math.ceil(max(n_source, n_target) / N_SOURCE_PER_BATCH)


def _epoch_indices(n: int, n_max: int, steps: int, per_step: int, rng: np.random.Generator) -> np.ndarray:
    need = steps * per_step
    if n == n_max:
        idx = rng.permutation(n)
        if need > n:
            idx = np.concatenate([idx, rng.integers(0, n, need - n)])
    else:
        idx = rng.integers(0, n, need)
    return idx[:need].reshape(steps, per_step)


def build_batch(xs, ys, xt, beta: float, classes: int, rng: np.random.Generator, mask_rngs) -> Batch:
    """Appearance-swapped views and structure masks for one iteration.

    Each source borrows low-frequency amplitude from a randomly paired target
    in the batch and vice versa.  Target item ``i`` is blended with the other
    target item under its own mask, shared between the X_t and X_tfs views.
    """
    n_s, n_t = len(xs), len(xt)
    pair_s = rng.permutation(n_t)[np.arange(n_s) % n_t]
    pair_t = rng.permutation(n_s)[np.arange(n_t) % n_s]
    xsft = np.stack([amplitude_swap(xs[i], xt[pair_s[i]], beta) for i in range(n_s)])
    xtfs = np.stack([amplitude_swap(xt[j], xs[pair_t[j]], beta) for j in range(n_t)])
    partners = [(j + 1) % n_t for j in range(n_t)]
    masks = [sample_cuboid(xt[j].shape, r) for j, r in zip(range(n_t), mask_rngs)]
    ys_hot = np.stack([one_hot(y, classes) for y in ys])
    return Batch(np.stack(xs), ys_hot, xsft, np.stack(xt), xtfs, masks, partners)


def student_loss(p: np.ndarray, batch: Batch, teacher_out, flags: Flags, lam: float, cfg: NetConfig):
    """Total loss and its parameter gradient for one batch.

    ``teacher_out`` is ``(f'(X_t), f'(X_tfs))`` or ``None`` when no
    consistency term is active.  Teacher predictions enter only as constants.
    Returns ``(LossValue_total, parts, grad)`` with ``parts`` the
    ``(l_seg, l_app, l_str)`` values.
    """
    n_s, n_t = len(batch.xs), len(batch.xt)
    views = [batch.xs]
    if flags.seg_sft:
        views.append(batch.xsft)
    if flags.app_xt:
        views.append(batch.xt)
    if flags.app_xtfs:
        views.append(batch.xtfs)
    if flags.structure:
        xt_sp = np.stack([blend(batch.xt[j], batch.xt[k], m) for j, k, m in zip(range(n_t), batch.partners, batch.masks)])
        xtfs_sp = np.stack(
            [blend(batch.xtfs[j], batch.xtfs[k], m) for j, k, m in zip(range(n_t), batch.partners, batch.masks)]
        )
        views += [xt_sp, xtfs_sp]
    inputs = np.concatenate(views)
    probs, cache = forward(p, inputs, cfg)

    pos = 0

    def take(n):
        nonlocal pos
        out = probs[pos:pos + n]
        pos += n
        return out

    p_s = take(n_s)
    if flags.seg_sft:
        l_seg = losses.seg_loss(p_s, take(n_s), batch.ys)
    else:
        l_seg = losses.soft_dice_loss(p_s, batch.ys)

    l_app = l_str = None
    app_grads: list[np.ndarray] = []
    if flags.app_xt or flags.app_xtfs:
        ft_xt, ft_xtfs = teacher_out
        f_xt = take(n_t) if flags.app_xt else None
        f_xtfs = take(n_t) if flags.app_xtfs else None
        l_app = losses.appearance_consistency(
            f_xt if f_xt is not None else ft_xtfs,
            f_xtfs if f_xtfs is not None else ft_xt,
            ft_xt,
            ft_xtfs,
            use_xt=flags.app_xt,
            use_xtfs=flags.app_xtfs,
        )
        app_grads = [g for g, on in zip(l_app.grads, (flags.app_xt, flags.app_xtfs)) if on]
    if flags.structure:
        ft_xt, ft_xtfs = teacher_out
        pseudo_t = np.stack([pseudo_label(ft_xtfs[j], ft_xtfs[k], m) for j, k, m in zip(range(n_t), batch.partners, batch.masks)])
        pseudo_tfs = np.stack([pseudo_label(ft_xt[j], ft_xt[k], m) for j, k, m in zip(range(n_t), batch.partners, batch.masks)])
        l_str = losses.structure_consistency(take(n_t), take(n_t), pseudo_t, pseudo_tfs)

    total = losses.total_loss(l_seg, l_app, l_str, lam)
    grad_parts = list(l_seg.grads)
    grad_parts += [lam * g for g in app_grads]
    if l_str is not None:
        grad_parts += [lam * g for g in l_str.grads]
    d_probs = np.concatenate(grad_parts)
    grad = backward(p, cache, d_probs)
    parts = (l_seg.value, l_app.value if l_app else 0.0, l_str.value if l_str else 0.0)
    return total, parts, grad


def teacher_predict(p_teacher: np.ndarray, batch: Batch, cfg: NetConfig):
    n_t = len(batch.xt)
    probs, _ = forward(p_teacher, np.concatenate([batch.xt, batch.xtfs]), cfg)
    return probs[:n_t], probs[n_t:]


def train(cfg: TrainConfig, source_set, target_set, eval_set=None, ckpt_dir=None):
    """Run training; returns ``(student_params, teacher_params, TrainLog)``.

    ``source_set`` holds ``(volume, labels)`` pairs, ``target_set`` unlabeled
    volumes.  Volumes are z-normalized here.  ``eval_set`` (optional) is a list
    of ``(volume, labels)`` scored once per epoch with the student.
    """
    if not source_set or not target_set:
        raise ValueError("source and target sets must be non-empty")
    dims = np.shape(source_set[0][0])
    xs_all = [znormalize(v) for v, _ in source_set]
    ys_all = [as_labels(y, cfg.classes) for _, y in source_set]
    xt_all = [znormalize(v) for v in target_set]
    for arr in xs_all + ys_all + xt_all:
        if arr.shape != dims:
            raise ValueError(f"all volumes must share dims {dims}, got {arr.shape}")

    flags = Flags.for_mode(cfg.ablation)
    net = cfg.net_config()
    n_steps = steps_per_epoch(len(xs_all), len(xt_all))
    sched = cfg.schedule(n_steps)
    student = init_params(net)
    teacher = student.copy()
    adam = AdamState.zeros(student.size)
    tlog = TrainLog()
    n_max = max(len(xs_all), len(xt_all))

    with _deterministic_context(cfg.deterministic):
        for epoch in range(cfg.epochs):
            ep_rng = np.random.default_rng([cfg.seed, 1, epoch])
            s_idx = _epoch_indices(len(xs_all), n_max, n_steps, N_SOURCE_PER_BATCH, ep_rng)
            t_idx = _epoch_indices(len(xt_all), n_max, n_steps, N_TARGET_PER_BATCH, ep_rng)
            lr = poly_lr(epoch, sched)
            for it in range(n_steps):
                step = epoch * n_steps + it
                rng = np.random.default_rng([cfg.seed, 2, step])
                mask_rngs = [np.random.default_rng([cfg.seed, 3, step, j]) for j in range(N_TARGET_PER_BATCH)]
                batch = build_batch(
                    [xs_all[i] for i in s_idx[it]],
                    [ys_all[i] for i in s_idx[it]],
                    [xt_all[i] for i in t_idx[it]],
                    cfg.beta,
                    cfg.classes,
                    rng,
                    mask_rngs,
                )
                lam = ramp_lambda(step, sched)
                teacher_out = teacher_predict(teacher, batch, net) if flags.uses_teacher else None
                total, (l_seg, l_app, l_str), grad = student_loss(student, batch, teacher_out, flags, lam, net)
                record = {
                    "step": step, "epoch": epoch, "lr": lr, "lambda": lam,
                    "l_seg": l_seg, "l_app": l_app, "l_str": l_str, "l_total": total.value,
                }
                if not (math.isfinite(total.value) and np.all(np.isfinite(grad))):
                    raise NumericalError(f"non-finite loss at step {step}: {record}", record)
                tlog.records.append(record)
                if flags.structure:
                    tlog.masks.extend((step, j, m) for j, m in enumerate(batch.masks))
                student, adam = adam_step(student, grad, adam, lr)
                teacher = ema_update(teacher, student, cfg.alpha)
            if eval_set is not None:
                report = evaluate(student, eval_set, net)
                tlog.eval_dsc.append((epoch, report.avg))
                log.info("epoch %d: target dsc %.4f", epoch, report.avg)
            if ckpt_dir is not None and cfg.ckpt_every and (epoch + 1) % cfg.ckpt_every == 0:
                save_params(Path(ckpt_dir) / f"student_epoch{epoch + 1:03d}.ascp", student)
                save_params(Path(ckpt_dir) / f"teacher_epoch{epoch + 1:03d}.ascp", teacher)
    return student, teacher, tlog


def predict_labels(p: np.ndarray, v, cfg: NetConfig) -> np.ndarray:
    """Argmax segmentation of one volume (ties go to the lowest class index)."""
    probs, _ = forward(p, znormalize(v)[None], cfg)
    return np.argmax(probs[0], axis=0).astype(np.uint8)


def evaluate(p: np.ndarray, eval_set, cfg: NetConfig, predictor=None, names=None) -> "metrics.DscReport":
    """Per-class DSC of the model's argmax predictions plus subset aggregates.

    ``eval_set`` items are ``(volume, labels)`` or ``(volume, labels, subset)``.
    ``predictor(volume) -> ProbMap`` overrides the network (used for stubs).
    """
    per_volume, tags = [], []
    for item in eval_set:
        v, y = item[0], item[1]
        tags.append(item[2] if len(item) > 2 else metrics.NORMAL)
        if predictor is None:
            pred = predict_labels(p, v, cfg)
        else:
            pred = np.argmax(predictor(v), axis=0).astype(np.uint8)
        per_volume.append(metrics.dsc(pred, y, cfg.classes))
    return metrics.aggregate(per_volume, tags, names=names)
