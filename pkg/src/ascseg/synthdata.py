"""Synthetic two-domain phantoms: nested-ellipsoid "tissues" with a source
appearance and a shifted target appearance.

Class k >= 1 occupies the voxels inside ellipsoids 1..k but not k+1, so shells
are nested by construction.  The target domain differs by a monotone
nonlinear intensity remap and a smooth multiplicative bias field; abnormal
targets additionally have deformed inner structures.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

NORMAL = "normal"
ABNORMAL = "abnormal"


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (24, 24, 24)
    classes: int = 4
    # semi-axes as fractions of dims, outermost first
    semi_axes: tuple[tuple[float, float, float], ...] = (
        (0.44, 0.40, 0.42),
        (0.34, 0.30, 0.32),
        (0.22, 0.19, 0.21),
    )
    source_intensities: tuple[float, ...] = (0.0, 2.0, 3.0, 1.0)
    target_intensities: tuple[float, ...] = (0.0, 1.6, 2.4, 1.0)
    target_gamma: float = 0.35
    noise_sigma: float = 0.15
    blur_sigma: float = 0.6
    jitter: float = 0.05
    # abnormal: per-axis scale of the middle ellipsoid and enlargement of the inner one
    abnormal_middle_scale: tuple[float, float] = (0.8, 1.2)
    abnormal_inner_scale: tuple[float, float] = (1.15, 1.4)
    bias_strength: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if len(self.semi_axes) != self.classes - 1 or len(self.source_intensities) != self.classes:
            raise ValueError("need one ellipsoid per foreground class and one intensity per class")
        if len(self.target_intensities) != self.classes:
            raise ValueError("need one target intensity per class")
        for outer, inner in zip(self.semi_axes, self.semi_axes[1:]):
            if not all(o > i for o, i in zip(outer, inner)):
                raise ValueError("semi-axes must be strictly nested")
        levels = sorted(self.source_intensities)
        if min(np.diff(levels)) < 3 * self.noise_sigma:
            raise ValueError("source intensities must be separated by >= 3 noise sigmas")


def _rng(spec: PhantomSpec, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, stream, index])


def _grid(dims):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")


def _labels(dims, center, axes_vox) -> np.ndarray:
    coords = _grid(dims)
    labels = np.zeros(dims, dtype=np.uint8)
    inside_all = np.ones(dims, dtype=bool)
    for k, axes in enumerate(axes_vox, start=1):
        r2 = sum(((x - c) / a) ** 2 for x, c, a in zip(coords, center, axes))
        inside_all &= r2 <= 1.0
        labels[inside_all] = k
    return labels


def _geometry(spec: PhantomSpec, rng: np.random.Generator, abnormal: bool):
    dims = np.array(spec.dims, dtype=np.float64)
    center = (dims - 1) / 2 * (1 + rng.uniform(-spec.jitter, spec.jitter, 3))
    axes = []
    for k, frac in enumerate(spec.semi_axes):
        a = np.array(frac) * dims * (1 + rng.uniform(-spec.jitter, spec.jitter, 3))
        axes.append(a)
    if abnormal:
        if len(axes) >= 2:
            axes[-2] = axes[-2] * rng.uniform(*spec.abnormal_middle_scale, 3)
        axes[-1] = axes[-1] * rng.uniform(*spec.abnormal_inner_scale, 3)
    return center, axes


def _render(labels: np.ndarray, intensities, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(intensities, dtype=np.float64)[labels]
    if spec.blur_sigma > 0:
        img = gaussian_filter(img, spec.blur_sigma, mode="nearest")
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return img


def gen_source(n: int, spec: PhantomSpec = PhantomSpec()) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n`` labeled source-domain phantoms (raw intensities, not normalized)."""
    out = []
    for i in range(n):
        rng = _rng(spec, 0, i)
        center, axes = _geometry(spec, rng, abnormal=False)
        labels = _labels(spec.dims, center, axes)
        img = _render(labels, spec.source_intensities, spec, rng)
        out.append((img.astype(np.float32), labels))
    return out


def target_remap(x: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Monotone gamma-like curve applied after the per-class level shift."""
    top = max(spec.target_intensities)
    return top * np.clip(x / top, 0.0, None) ** spec.target_gamma


def gen_target(n: int, spec: PhantomSpec = PhantomSpec(), abnormal_fraction: float = 0.5, stream: int = 1):
    """``n`` target-domain phantoms as ``(volume, labels, subset_tag)``.

    Labels are for evaluation only.  ``stream`` separates independent target
    draws (e.g. training versus test scans) under one spec seed.
    """
    if not 0.0 <= abnormal_fraction <= 1.0:
        raise ValueError("abnormal_fraction must lie in [0, 1]")
    order = np.random.default_rng([spec.seed, stream, 10**6]).permutation(n)
    n_abnormal = int(round(n * abnormal_fraction))
    abnormal_set = set(order[:n_abnormal].tolist())
    out = []
    for i in range(n):
        rng = _rng(spec, stream, i)
        abnormal = i in abnormal_set
        center, axes = _geometry(spec, rng, abnormal)
        labels = _labels(spec.dims, center, axes)
        levels = np.asarray(spec.target_intensities, dtype=np.float64)[labels]
        if spec.blur_sigma > 0:
            levels = gaussian_filter(levels, spec.blur_sigma, mode="nearest")
        img = target_remap(levels, spec) * bias_field(spec.dims, int(rng.integers(2**32)), spec.bias_strength)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
        out.append((img.astype(np.float32), labels, ABNORMAL if abnormal else NORMAL))
    return out


def bias_field(dims, seed: int, strength: float = 0.3, max_step: float = 0.045) -> np.ndarray:
    """Smooth multiplicative field ``1 + a * S`` from low-frequency cosine products.

    ``S`` sums products of per-axis cosines with at most 2 cycles per axis (the
    all-zero frequency is excluded, so the grid mean of ``S`` is 0).  ``a``
    keeps the field inside ``[1 - strength, 1 + strength]`` and the largest
    neighbouring-voxel difference at or below ``max_step``.
    """
    dims = tuple(int(n) for n in dims)
    rng = np.random.default_rng(seed)
    coords = _grid(dims)
    s = np.zeros(dims)
    freqs = [(a, b, c) for a in range(3) for b in range(3) for c in range(3) if (a, b, c) != (0, 0, 0)]
    for f in freqs:
        weight = rng.normal() / float(sum(k * k for k in f))
        term = np.ones(dims)
        for x, n, k in zip(coords, dims, f):
            term = term * np.cos(2 * np.pi * k * x / n + rng.uniform(0, 2 * np.pi))
        s += weight * term
    steps = [np.abs(np.diff(s, axis=ax)).max() for ax in range(3) if dims[ax] > 1]
    a = strength / np.abs(s).max()
    if steps:
        a = min(a, max_step / max(steps))
    return (1.0 + a * s).astype(np.float32)
