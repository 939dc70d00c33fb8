"""Cuboid structure perturbation: random box sampling and CutMix-style blending."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRACTION_RANGE = (0.25, 0.5)
REALIZED_BOUNDS = (0.20, 0.55)
JITTER_RANGE = (0.8, 1.25)
_MAX_TRIES = 1000


@dataclass(frozen=True)
class CuboidMask:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]
    dims: tuple[int, int, int]

    def __post_init__(self):
        for o, l, n in zip(self.origin, self.size, self.dims):
            if l < 1 or o < 0 or o + l > n:
                raise ValueError(f"box {self.origin}+{self.size} not contained in {self.dims}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + l) for o, l in zip(self.origin, self.size))

    @property
    def fraction(self) -> float:
        return float(np.prod(self.size) / np.prod(self.dims))

    def to_array(self) -> np.ndarray:
        m = np.zeros(self.dims, dtype=bool)
        m[self.slices] = True
        return m


def sample_cuboid(dims, rng: np.random.Generator) -> CuboidMask:
    """Draw a box covering a Uniform[0.25, 0.5] fraction of the grid volume.

    The cube-root side fraction is jittered per axis and renormalised so the
    sides multiply back to the drawn fraction.  Draws whose integer-rounded
    volume falls outside [0.20, 0.55] are redrawn.
    """
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 4:
        raise ValueError(f"every dim must be >= 4, got {dims}")
    n_vox = np.prod(dims)
    for _ in range(_MAX_TRIES):
        f = rng.uniform(*FRACTION_RANGE)
        jitter = rng.uniform(*JITTER_RANGE, size=3)
        sides = f ** (1 / 3) * jitter / np.prod(jitter) ** (1 / 3)
        size = tuple(int(np.clip(round(s * n), 1, n)) for s, n in zip(sides, dims))
        if REALIZED_BOUNDS[0] <= np.prod(size) / n_vox <= REALIZED_BOUNDS[1]:
            origin = tuple(int(rng.integers(0, n - l + 1)) for n, l in zip(dims, size))
            return CuboidMask(origin, size, dims)
    raise ValueError(f"dims {dims} too small to realise a box fraction in {REALIZED_BOUNDS}")


def blend(a, b, mask: CuboidMask) -> np.ndarray:
    """``b`` inside the box, ``a`` elsewhere; leading (channel) axes are carried along.

    Whole per-voxel vectors are selected, so probability maps stay on the simplex.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[-3:] != mask.dims:
        raise ValueError(f"mask dims {mask.dims} do not match grid {a.shape[-3:]}")
    out = a.copy()
    idx = (Ellipsis,) + mask.slices
    out[idx] = b[idx]
    return out


def pseudo_label(pa, pb, mask: CuboidMask) -> np.ndarray:
    """Blend two teacher probability maps into the target for a blended input.

    The result is a constant consistency target; no gradient flows through it.
    """
    pa = np.asarray(pa)
    if pa.ndim < 4:
        raise ValueError(f"expected a (C, D, H, W) probability map, got shape {pa.shape}")
    return blend(pa, pb, mask)
