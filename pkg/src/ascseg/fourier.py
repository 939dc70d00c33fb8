"""3D discrete Fourier transform and low-frequency amplitude swapping.

The transform is a vectorised mixed-radix Cooley-Tukey FFT applied along each
axis in turn, with Bluestein's chirp-z algorithm for large prime lengths.  All
arithmetic is complex128.  Frequency index ``u`` runs over ``[0, n)`` with DC
at index 0; the centered coordinate of ``u`` is ``u`` if ``u <= n/2`` else
``u - n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# primes up to this length are transformed by a direct DFT matrix product
_DIRECT_MAX = 32


@lru_cache(maxsize=None)
def _smallest_factor(n: int) -> int:
    for p in range(2, math.isqrt(n) + 1):
        if n % p == 0:
            return p
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    # reduce k*j mod n before scaling so the angle stays small and exact
    return np.exp(-2j * np.pi * ((np.outer(k, k) % n) / n))


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int) -> np.ndarray:
    n = p * m
    r = np.arange(p)[:, None]
    k = np.arange(m)[None, :]
    return np.exp(-2j * np.pi * (((r * k) % n) / n))


@lru_cache(maxsize=None)
def _bluestein_plan(n: int):
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    size = 1 << (2 * n - 1).bit_length()
    b = np.zeros(size, dtype=np.complex128)
    b[:n] = np.conj(chirp)
    b[size - n + 1:] = np.conj(chirp[1:])[::-1]
    return chirp, size, _fft_last(b)


def _fft_last(x: np.ndarray) -> np.ndarray:
    """Forward DFT along the last axis."""
    n = x.shape[-1]
    if n == 1:
        return x.astype(np.complex128, copy=True)
    p = _smallest_factor(n)
    if p == n:
        if n <= _DIRECT_MAX:
            return x @ _dft_matrix(n).T
        return _bluestein(x)
    m = n // p
    lead = x.shape[:-1]
    # decimation in time: sub[..., r, :] is the length-m FFT of x[..., r::p]
    sub = _fft_last(x.reshape(lead + (m, p)).swapaxes(-1, -2))
    sub = sub * _twiddles(p, m)
    # butterflies of radix p: X[q*m + k] = sum_r W_p^{rq} sub[r, k]
    out = np.matmul(_dft_matrix(p), sub)
    return out.reshape(lead + (n,))


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    chirp, size, b_hat = _bluestein_plan(n)
    a = np.zeros(x.shape[:-1] + (size,), dtype=np.complex128)
    a[..., :n] = x * chirp
    conv = _ifft_last(_fft_last(a) * b_hat)
    return conv[..., :n] * chirp


def _ifft_last(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    return np.conj(_fft_last(np.conj(x))) / n


def fft_axis(x, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    return np.moveaxis(_fft_last(x), -1, axis)


def ifft_axis(x, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    return np.moveaxis(_ifft_last(x), -1, axis)


def fft3(v) -> np.ndarray:
    """Complex128 spectrum of a real or complex 3D grid."""
    s = np.asarray(v, dtype=np.complex128)
    if s.ndim != 3:
        raise ValueError(f"fft3 expects a 3D grid, got shape {s.shape}")
    for axis in range(3):
        s = fft_axis(s, axis)
    return s


def ifft3(s) -> tuple[np.ndarray, float]:
    """Inverse transform; returns the real part and the largest |imag| residual."""
    x = np.asarray(s, dtype=np.complex128)
    if x.ndim != 3:
        raise ValueError(f"ifft3 expects a 3D grid, got shape {x.shape}")
    for axis in range(3):
        x = ifft_axis(x, axis)
    return x.real.copy(), float(np.abs(x.imag).max())


def decompose(s) -> tuple[np.ndarray, np.ndarray]:
    """Split a spectrum into amplitude and phase; phase lies in (-pi, pi].

    Zero-magnitude bins get phase 0.
    """
    s = np.asarray(s, dtype=np.complex128)
    amp = np.abs(s)
    phase = np.angle(s)
    phase[phase <= -np.pi] = np.pi
    phase[amp == 0] = 0.0
    return amp, phase


def compose(amplitude, phase) -> np.ndarray:
    return np.asarray(amplitude, dtype=np.float64) * np.exp(1j * np.asarray(phase, dtype=np.float64))


def centered_freqs(n: int) -> np.ndarray:
    u = np.arange(n)
    return np.where(u <= n / 2, u, u - n)


@dataclass(frozen=True)
class FreqMask:
    dims: tuple[int, int, int]
    half_widths: tuple[int, int, int]
    data: np.ndarray

    @property
    def cardinality(self) -> int:
        return int(self.data.sum())


def low_freq_mask(dims, beta: float) -> FreqMask:
    """Box of frequencies with ``|centered(u_k)| <= floor(beta * n_k)`` on every axis."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"bad dims {dims}")
    # guard floor() against products like 0.29 * 100 = 28.999999999999996
    half = tuple(int(math.floor(beta * n + 1e-9)) for n in dims)
    axes = [np.abs(centered_freqs(n)) <= h for n, h in zip(dims, half)]
    data = axes[0][:, None, None] & axes[1][None, :, None] & axes[2][None, None, :]
    return FreqMask(dims, half, data)


def amplitude_swap_with_residual(src, tgt, beta: float) -> tuple[np.ndarray, float]:
    src = np.asarray(src)
    tgt = np.asarray(tgt)
    if src.shape != tgt.shape:
        raise ValueError(f"dims mismatch: {src.shape} vs {tgt.shape}")
    mask = low_freq_mask(src.shape, beta).data
    amp_src, phase_src = decompose(fft3(src))
    amp_tgt = np.abs(fft3(tgt))
    amp = np.where(mask, amp_tgt, amp_src)
    out, residual = ifft3(compose(amp, phase_src))
    return out.astype(np.float32), residual


def amplitude_swap(src, tgt, beta: float) -> np.ndarray:
    """Give ``src`` the low-frequency amplitude of ``tgt`` while keeping its phase.

    The swap mask is symmetric under frequency negation, so the result of the
    inverse transform is real up to rounding; a larger imaginary residual
    raises ``FloatingPointError``.
    """
    out, residual = amplitude_swap_with_residual(src, tgt, beta)
    scale = max(1.0, float(np.abs(out).max()))
    if residual > 1e-5 * scale:
        raise FloatingPointError(f"amplitude swap left imaginary residual {residual:.3g}")
    return out
