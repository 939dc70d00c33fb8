"""Three-layer 3D convolutional segmenter with hand-written reverse mode.

Architecture: conv(1->F, 3^3, zero pad 1) -> ReLU -> conv(F->F, 3^3, pad 1)
-> ReLU -> conv(F->C, 1^3) -> softmax over classes.  Parameters live in one
flat vector laid out layer by layer as (weight, bias), weights in
``(out, in, kd, kh, kw)`` order.

Convolutions run as one matrix product per batch item over an im2col matrix
built on the flattened zero-padded grid (see :class:`_FlatGrid`).  The
forward pass computes in the dtype of the parameter vector, so float64
parameters give a float64 pass suitable for finite-difference checks.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"ASCP1"


@dataclass(frozen=True)
class NetConfig:
    hidden: int = 8
    classes: int = 4
    seed: int = 0
    in_channels: int = 1

    def __post_init__(self):
        if self.hidden < 1 or self.classes < 2 or self.in_channels != 1:
            raise ValueError(f"invalid NetConfig {self}")

    def layer_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        f, c = self.hidden, self.classes
        return [
            ((f, self.in_channels, 3, 3, 3), (f,)),
            ((f, f, 3, 3, 3), (f,)),
            ((c, f, 1, 1, 1), (c,)),
        ]

    def offsets(self) -> list[tuple[int, int, int]]:
        """(weight start, bias start, end) per layer in the flat vector."""
        table, pos = [], 0
        for w_shape, b_shape in self.layer_shapes():
            w_end = pos + int(np.prod(w_shape))
            end = w_end + int(np.prod(b_shape))
            table.append((pos, w_end, end))
            pos = end
        return table

    @property
    def n_params(self) -> int:
        return self.offsets()[-1][2]


def config_for_count(n_params: int, classes: int = 4) -> NetConfig:
    """Recover the hidden width from a flat parameter count."""
    for hidden in range(1, 513):
        cfg = NetConfig(hidden=hidden, classes=classes)
        if cfg.n_params == n_params:
            return cfg
        if cfg.n_params > n_params:
            break
    raise ValueError(f"no network with {classes} classes has {n_params} parameters")


def init_params(cfg: NetConfig) -> np.ndarray:
    """He-normal weights, zero biases, float32."""
    rng = np.random.default_rng(cfg.seed)
    p = np.zeros(cfg.n_params, dtype=np.float32)
    for (w_shape, _), (w0, b0, _) in zip(cfg.layer_shapes(), cfg.offsets()):
        fan_in = int(np.prod(w_shape[1:]))
        p[w0:b0] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=b0 - w0)
    return p


def unpack(p: np.ndarray, cfg: NetConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    if p.shape != (cfg.n_params,):
        raise ValueError(f"parameter vector has shape {p.shape}, expected ({cfg.n_params},)")
    layers = []
    for (w_shape, b_shape), (w0, b0, end) in zip(cfg.layer_shapes(), cfg.offsets()):
        layers.append((p[w0:b0].reshape(w_shape), p[b0:end].reshape(b_shape)))
    return layers


@dataclass
class ForwardCache:
    cfg: NetConfig
    batched: bool
    cols1: np.ndarray
    z1: np.ndarray
    cols2: np.ndarray
    z2: np.ndarray
    h2: np.ndarray
    probs: np.ndarray


class _FlatGrid:
    """Index arithmetic for a zero-padded grid flattened to one axis.

    In the flattened padded grid a kernel offset (kd, kh, kw) is a constant
    shift, so every im2col row is a contiguous slice.  Convolution outputs are
    produced on an "extended" range of ``n_ext`` flat positions that includes
    the padding columns; :meth:`to_grid` drops them.
    """

    def __init__(self, spatial):
        self.d, self.h, self.w = spatial
        self.hp, self.wp = self.h + 2, self.w + 2
        self.n_ext = (self.d - 1) * self.hp * self.wp + (self.h - 1) * self.wp + self.w
        self.offsets = [
            kd * self.hp * self.wp + kh * self.wp + kw for kd in range(3) for kh in range(3) for kw in range(3)
        ]

    def pad_flat(self, x: np.ndarray) -> np.ndarray:
        n, c = x.shape[:2]
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1))).reshape(n, c, -1)

    def im2col(self, x: np.ndarray) -> np.ndarray:
        """(N, Cin, D, H, W) -> (N, Cin*27, n_ext)."""
        xp = self.pad_flat(x)
        n, cin = xp.shape[:2]
        cols = np.empty((n, cin, 27, self.n_ext), dtype=x.dtype)
        for i, off in enumerate(self.offsets):
            cols[:, :, i, :] = xp[:, :, off:off + self.n_ext]
        return cols.reshape(n, cin * 27, self.n_ext)

    def col2im(self, dcols: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`im2col`: (N, Cin*27, n_ext) -> (N, Cin, D, H, W)."""
        n = dcols.shape[0]
        dcols = dcols.reshape(n, -1, 27, self.n_ext)
        cin = dcols.shape[1]
        dxp = np.zeros((n, cin, (self.d + 2) * self.hp * self.wp), dtype=dcols.dtype)
        for i, off in enumerate(self.offsets):
            dxp[:, :, off:off + self.n_ext] += dcols[:, :, i, :]
        return dxp.reshape(n, cin, self.d + 2, self.hp, self.wp)[:, :, 1:-1, 1:-1, 1:-1]

    def to_grid(self, ext: np.ndarray) -> np.ndarray:
        n, c = ext.shape[:2]
        full = np.zeros((n, c, self.d * self.hp * self.wp), dtype=ext.dtype)
        full[:, :, : self.n_ext] = ext
        return full.reshape(n, c, self.d, self.hp, self.wp)[:, :, :, : self.h, : self.w]

    def to_ext(self, grid: np.ndarray) -> np.ndarray:
        n, c = grid.shape[:2]
        full = np.zeros((n, c, self.d, self.hp, self.wp), dtype=grid.dtype)
        full[:, :, :, : self.h, : self.w] = grid
        return full.reshape(n, c, -1)[:, :, : self.n_ext]


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def forward(p: np.ndarray, v: np.ndarray, cfg: NetConfig) -> tuple[np.ndarray, ForwardCache]:
    """Class probabilities for a volume ``(D, H, W)`` or a batch ``(N, D, H, W)``.

    Returns ``(C, D, H, W)`` (or ``(N, C, D, H, W)``) probabilities and the
    cache needed by :func:`backward`.
    """
    v = np.asarray(v)
    batched = v.ndim == 4
    if not batched:
        v = v[None]
    if v.ndim != 4:
        raise ValueError(f"expected (D, H, W) or (N, D, H, W) input, got shape {v.shape}")
    (w1, b1), (w2, b2), (w3, b3) = unpack(p, cfg)
    grid = _FlatGrid(v.shape[1:])
    f, c = cfg.hidden, cfg.classes
    bias = lambda b: b[None, :, None, None, None]

    cols1 = grid.im2col(v.astype(p.dtype)[:, None])
    z1 = grid.to_grid(np.matmul(w1.reshape(f, -1), cols1)) + bias(b1)
    cols2 = grid.im2col(np.maximum(z1, 0))
    z2 = grid.to_grid(np.matmul(w2.reshape(f, -1), cols2)) + bias(b2)
    h2 = np.maximum(z2, 0)
    logits = np.einsum("cf,nfdhw->ncdhw", w3.reshape(c, f), h2, optimize=True) + bias(b3)
    probs = _softmax(logits, axis=1)

    out = probs if batched else probs[0]
    return out, ForwardCache(cfg, batched, cols1, z1, cols2, z2, h2, probs)


def backward(p: np.ndarray, cache: ForwardCache, d_probs: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameters given dL/dProb."""
    cfg = cache.cfg
    (w1, _), (w2, _), (w3, _) = unpack(p, cfg)
    g = np.asarray(d_probs)
    if not cache.batched:
        g = g[None]
    probs = cache.probs
    if g.shape != probs.shape:
        raise ValueError(f"upstream gradient shape {g.shape} does not match cache {probs.shape}")
    g = g.astype(probs.dtype)
    f, c = cfg.hidden, cfg.classes
    grid = _FlatGrid(probs.shape[2:])
    axes = (0, 2, 3, 4)

    # softmax Jacobian-vector product
    dlogits = probs * (g - (g * probs).sum(axis=1, keepdims=True))
    dw3 = np.einsum("ncdhw,nfdhw->cf", dlogits, cache.h2, optimize=True)
    db3 = dlogits.sum(axis=axes)
    dz2 = np.einsum("cf,ncdhw->nfdhw", w3.reshape(c, f), dlogits, optimize=True) * (cache.z2 > 0)
    dz2_ext = grid.to_ext(dz2)
    dw2 = np.matmul(dz2_ext, cache.cols2.transpose(0, 2, 1)).sum(axis=0)
    db2 = dz2.sum(axis=axes)
    da1 = grid.col2im(np.matmul(w2.reshape(f, -1).T, dz2_ext))
    dz1 = da1 * (cache.z1 > 0)
    dz1_ext = grid.to_ext(dz1)
    dw1 = np.matmul(dz1_ext, cache.cols1.transpose(0, 2, 1)).sum(axis=0)
    db1 = dz1.sum(axis=axes)
    return np.concatenate([np.asarray(gr, dtype=np.float64).ravel() for gr in (dw1, db1, dw2, db2, dw3, db3)])


def finite_diff_grad(p: np.ndarray, v, loss_fn, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of ``loss_fn(p, v)`` in float64."""
    p = np.asarray(p, dtype=np.float64).copy()
    grad = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + eps
        up = float(loss_fn(p, v))
        p[i] = orig - eps
        down = float(loss_fn(p, v))
        p[i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad


def save_params(path, p: np.ndarray) -> None:
    p = np.asarray(p)
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", p.size) + p.astype("<f4").tobytes())


def load_params(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:5] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an ASCP1 checkpoint")
    if len(raw) < 9:
        raise ValueError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<I", raw, 5)
    payload = raw[9:]
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: expected {count} params, payload has {len(payload)} bytes")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)
