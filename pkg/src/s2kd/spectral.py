"""Fourier transforms of latent token sequences and the spectral alignment loss.

The transform runs along the token axis of an ``[..., L, D]`` latent, one
independent real signal per feature channel. Power-of-two lengths use an
iterative radix-2 Cooley-Tukey kernel; other lengths use a direct O(L^2) DFT.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from ._accel import USE_NUMBA, njit
from .errors import ConfigurationError, DimensionError

MAG_EPS = 1e-12


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@njit(cache=True)
def _fft_rows_numba(x):
    rows, n = x.shape
    out = np.empty_like(x)
    bits = 0
    while (1 << bits) < n:
        bits += 1
    for r in range(rows):
        for i in range(n):
            j = 0
            v = i
            for _ in range(bits):
                j = (j << 1) | (v & 1)
                v >>= 1
            out[r, j] = x[r, i]
    size = 2
    while size <= n:
        half = size // 2
        for k in range(half):
            ang = -2.0 * np.pi * k / size
            w = np.cos(ang) + 1j * np.sin(ang)
            for r in range(rows):
                for start in range(0, n, size):
                    a = out[r, start + k]
                    b = out[r, start + k + half] * w
                    out[r, start + k] = a + b
                    out[r, start + k + half] = a - b
        size *= 2
    return out


def _fft_rows_numpy(x):
    rows, n = x.shape
    out = x[:, bit_reverse_permutation(n)]
    size = 2
    while size <= n:
        half = size // 2
        w = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(rows, n // size, size)
        a = blocks[:, :, :half].copy()
        b = blocks[:, :, half:] * w
        blocks[:, :, :half] = a + b
        blocks[:, :, half:] = a - b
        size *= 2
    return out


_fft_rows = _fft_rows_numba if USE_NUMBA else _fft_rows_numpy


@lru_cache(maxsize=64)
def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def naive_dft(x, inverse: bool = False) -> np.ndarray:
    """Direct O(n^2) DFT along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    w = _dft_matrix(n)
    if inverse:
        return (x @ w.conj()) / n
    return x @ w


def fft_radix2(x, inverse: bool = False) -> np.ndarray:
    """FFT along the last axis; non-power-of-two lengths use the direct DFT.

    The inverse carries the 1/n normalisation so ``fft_radix2(fft_radix2(x), True)``
    reproduces ``x``.
    """
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n <= 1:
        return x.copy()
    if not is_power_of_two(n):
        return naive_dft(x, inverse)
    rows = np.ascontiguousarray(x.reshape(-1, n))
    if inverse:
        return (_fft_rows(rows.conj()).conj() / n).reshape(x.shape)
    return _fft_rows(rows).reshape(x.shape)


@lru_cache(maxsize=64)
def _real_dft_basis(n: int, dtype) -> tuple:
    bins = n // 2 + 1
    ang = 2.0 * np.pi * np.outer(np.arange(n), np.arange(bins)) / n
    return np.cos(ang).astype(dtype), (-np.sin(ang)).astype(dtype)


def _rfft_last(x: np.ndarray) -> np.ndarray:
    """Real-input DFT along the last axis, returned as stacked ``[..., F, 2]`` (re, im)."""
    n = x.shape[-1]
    if is_power_of_two(n) and n >= 2:
        spec = fft_radix2(x)[..., : n // 2 + 1]
        return np.stack([spec.real, spec.imag], axis=-1).astype(x.dtype)
    cos, sin = _real_dft_basis(n, x.dtype)
    return np.stack([x @ cos, x @ sin], axis=-1)


def _rfft_adjoint_last(g: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of :func:`_rfft_last`: maps ``[..., F, 2]`` cotangents back to ``[..., n]``."""
    if is_power_of_two(n) and n >= 2:
        full = np.zeros(g.shape[:-2] + (n,), dtype=np.complex128)
        full[..., : g.shape[-2]] = g[..., 0] - 1j * g[..., 1]
        return fft_radix2(full).real.astype(g.dtype)
    cos, sin = _real_dft_basis(n, g.dtype)
    return g[..., 0] @ cos.T + g[..., 1] @ sin.T


def rfft(z, axis: int = -2) -> T.Tensor:
    """Differentiable real DFT along ``axis``; output ``[..., F, ...rest, 2]``.

    The transformed axis is replaced by ``F = L // 2 + 1`` bins and a trailing
    axis of size 2 holds (real, imaginary).
    """
    z = T.as_tensor(z)
    if not -z.ndim <= axis < z.ndim:
        raise DimensionError(f"rfft axis {axis} out of range for shape {z.shape}")
    axis %= z.ndim
    n = z.shape[axis]
    moved = np.moveaxis(z.data, axis, -1)
    spec = _rfft_last(moved)  # [..., F, 2] with the transformed axis last-but-one
    out = np.moveaxis(spec, -2, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -2)
        return (np.moveaxis(_rfft_adjoint_last(gm, n), -1, axis),)

    return T._make(out, (z,), backward, "rfft")


@dataclass
class MagnitudeSpectrum:
    values: T.Tensor
    axis: int
    source_length: int

    @property
    def bins(self) -> int:
        return self.values.shape[self.axis]


def rfft_magnitude(z, axis: int = -2, eps: float = MAG_EPS) -> MagnitudeSpectrum:
    """Smoothed magnitude ``sqrt(re^2 + im^2 + eps)`` of the real DFT along ``axis``."""
    z = T.as_tensor(z)
    if not -z.ndim <= axis < z.ndim:
        raise DimensionError(f"rfft axis {axis} out of range for shape {z.shape}")
    axis %= z.ndim
    n = z.shape[axis]
    if n < 2:
        raise ConfigurationError(f"spectral transform needs at least 2 samples along axis {axis}, got {n}")
    spec = rfft(z, axis)
    power = T.sum(T.square(spec), axis=-1)
    return MagnitudeSpectrum(T.sqrt_eps(power, eps), axis, n)


def spectral_loss(student_proj, teacher_fused, axis: int = -2, eps: float = MAG_EPS) -> T.Tensor:
    """Mean absolute difference between the two magnitude spectra."""
    student_proj, teacher_fused = T.as_tensor(student_proj), T.as_tensor(teacher_fused)
    if student_proj.shape != teacher_fused.shape:
        raise DimensionError(
            f"spectral_loss: student {student_proj.shape} vs teacher {teacher_fused.shape}"
        )
    ms = rfft_magnitude(student_proj, axis, eps).values
    mt = rfft_magnitude(teacher_fused, axis, eps).values
    return T.mean(T.abs(T.sub(ms, mt)))
