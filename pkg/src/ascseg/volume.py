"""Grid conventions, intensity normalization, one-hot encoding and RVOL IO.

Volumes are plain ``float32`` arrays of shape ``(D, H, W)`` in C order (W
fastest).  Label maps are ``uint8`` arrays of the same shape, probability maps
are ``(C, D, H, W)`` arrays with a leading class axis.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

RVOL_MAGIC = b"RVOL1"
DTYPE_F32 = 0
DTYPE_U8 = 1
_HEADER = struct.Struct("<5sB3I")


class RvolError(ValueError):
    """Base class for RVOL parse failures."""


class BadMagicError(RvolError):
    pass


class TruncatedError(RvolError):
    pass


class DimsMismatchError(RvolError):
    pass


def as_volume(v) -> np.ndarray:
    """Validate and return ``v`` as a float32 ``(D, H, W)`` volume."""
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 3 or min(v.shape) < 1:
        raise ValueError(f"volume must be 3D with positive dims, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    return v


def as_labels(y, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"label map must be 3D, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() > 255):
        raise ValueError("labels must fit in uint8")
    if num_classes is not None and y.size and int(y.max()) >= num_classes:
        raise ValueError(f"label {int(y.max())} out of range for {num_classes} classes")
    return y.astype(np.uint8)


def znormalize(v) -> np.ndarray:
    """Shift/scale to zero mean and unit (population) variance.

    Near-constant input (std < 1e-8) maps to all zeros.
    """
    x = np.asarray(v, dtype=np.float64)
    mean = x.mean()
    std = x.std()
    if std < 1e-8:
        return np.zeros(x.shape, dtype=np.float32)
    return ((x - mean) / std).astype(np.float32)


def one_hot(y, num_classes: int) -> np.ndarray:
    """Encode a label map as a ``(C, D, H, W)`` float32 probability map."""
    y = np.asarray(y)
    if y.size and int(y.max()) >= num_classes:
        raise ValueError(f"label {int(y.max())} out of range for {num_classes} classes")
    if y.size and int(y.min()) < 0:
        raise ValueError("negative label")
    classes = np.arange(num_classes).reshape((num_classes,) + (1,) * y.ndim)
    return (y[None] == classes).astype(np.float32)


def write_rvol(path, v) -> None:
    """Write a float volume or a uint8 label map in RVOL layout."""
    arr = np.asarray(v)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D grid, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        tag, payload = DTYPE_U8, arr.tobytes(order="C")
    else:
        tag, payload = DTYPE_F32, arr.astype("<f4").tobytes(order="C")
    header = _HEADER.pack(RVOL_MAGIC, tag, *arr.shape)
    Path(path).write_bytes(header + payload)


def read_rvol(path) -> np.ndarray:
    """Read an RVOL file; returns float32 for volumes and uint8 for labels."""
    raw = Path(path).read_bytes()
    if len(raw) < len(RVOL_MAGIC) or raw[: len(RVOL_MAGIC)] != RVOL_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:5]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    _, tag, d, h, w = _HEADER.unpack_from(raw)
    if tag == DTYPE_F32:
        dtype = np.dtype("<f4")
    elif tag == DTYPE_U8:
        dtype = np.dtype(np.uint8)
    else:
        raise RvolError(f"{path}: unknown dtype tag {tag}")
    if d * h * w == 0:
        raise DimsMismatchError(f"{path}: zero-sized dims {(d, h, w)}")
    expected = d * h * w * dtype.itemsize
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, dims {(d, h, w)} need {expected}")
    if len(payload) > expected:
        raise DimsMismatchError(f"{path}: payload has {len(payload)} bytes, dims {(d, h, w)} need {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(d, h, w)
    return arr.astype(np.float32 if tag == DTYPE_F32 else np.uint8)
