"""Iterative radix-2 FFT in numpy, including a real-input 2D transform.

Transforms run along trailing axes and are vectorized over everything in
front, so a stack of patches goes through in one call.  Precision follows the
input: float32 -> complex64, float64 -> complex128, longdouble -> clongdouble.
"""

from __future__ import annotations

import numpy as np

_COMPLEX = {
    np.dtype(np.float32): np.complex64,
    np.dtype(np.float64): np.complex128,
    np.dtype(np.longdouble): np.clongdouble,
}


def is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _complex_dtype(x: np.ndarray):
    if np.iscomplexobj(x):
        return x.dtype
    return _COMPLEX.get(x.dtype, np.complex128)


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """1D DFT along the last axis (unnormalized forward, 1/n inverse)."""
    x = np.asarray(x)
    n = x.shape[-1]
    if not is_pow2(n):
        raise ValueError(f"fft length must be a power of two, got {n}")
    cdt = np.dtype(_complex_dtype(x))
    real = np.empty(0, dtype=cdt).real.dtype.type
    pi = 4 * np.arctan(real(1))
    sign = 1 if inverse else -1
    y = x.astype(cdt)[..., _bit_reverse(n)]
    lead = y.shape[:-1]
    m = 2
    while m <= n:
        half = m // 2
        ang = sign * 2 * pi * np.arange(half, dtype=real) / real(m)
        tw = (np.cos(ang) + 1j * np.sin(ang)).astype(cdt)
        y = y.reshape(lead + (n // m, m))
        even = y[..., :half]
        odd = y[..., half:] * tw
        y = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    if inverse:
        y = y / real(n)
    return y


def fft2_full(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """2D DFT over the last two axes, full (non-Hermitian) storage."""
    y = fft(x, inverse)
    return np.swapaxes(fft(np.swapaxes(y, -1, -2), inverse), -1, -2)


def fft2(patch: np.ndarray) -> np.ndarray:
    """Real-input 2D DFT; keeps the non-redundant ``w // 2 + 1`` columns."""
    patch = np.asarray(patch)
    if np.iscomplexobj(patch):
        raise ValueError("fft2 expects real input")
    h, w = patch.shape[-2:]
    if not (is_pow2(h) and is_pow2(w)):
        raise ValueError(f"fft2 patch dims must be powers of two, got {h}x{w}")
    return fft2_full(patch)[..., : w // 2 + 1]


def hermitian_extend(half: np.ndarray, w: int) -> np.ndarray:
    """Rebuild the full ``(..., h, w)`` spectrum from its ``w // 2 + 1`` stored columns."""
    h = half.shape[-2]
    if half.shape[-1] != w // 2 + 1:
        raise ValueError(f"half spectrum has {half.shape[-1]} columns, expected {w // 2 + 1} for width {w}")
    rows = (-np.arange(h)) % h
    cols = np.arange(w // 2 + 1, w)
    mirrored = np.conj(half[..., rows, :][..., w - cols])
    return np.concatenate([half, mirrored], axis=-1)


def ifft2(spectrum: np.ndarray, width: int | None = None) -> np.ndarray:
    """Inverse of :func:`fft2`; ``width`` defaults to ``2 * (cols - 1)``."""
    spectrum = np.asarray(spectrum)
    w = width if width is not None else 2 * (spectrum.shape[-1] - 1)
    h = spectrum.shape[-2]
    if not (is_pow2(h) and is_pow2(w)):
        raise ValueError(f"ifft2 patch dims must be powers of two, got {h}x{w}")
    return fft2_full(hermitian_extend(spectrum, w), inverse=True).real
