import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssm3dcd.fft import fft, fft2, fft2_full, hermitian_extend, ifft2


def naive_dft2(x):
    """O(n^2) double sum per output bin."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for r in range(h):
                for s in range(w):
                    acc += x[r, s] * np.exp(-2j * np.pi * (u * r / h + v * s / w))
            out[u, v] = acc
    return out


@pytest.mark.parametrize("n", [4, 8])
def test_fft2_matches_naive_dft(rng, n):
    x = rng.normal(size=(n, n))
    ref = naive_dft2(x)
    assert np.max(np.abs(fft2(x) - ref[:, : n // 2 + 1])) < 1e-6
    assert np.max(np.abs(fft2_full(x) - ref)) < 1e-6


def test_fft_1d_matches_naive(rng):
    x = rng.normal(size=16) + 1j * rng.normal(size=16)
    k = np.arange(16)
    ref = np.exp(-2j * np.pi * np.outer(k, k) / 16) @ x
    assert np.allclose(fft(x), ref, atol=1e-12)
    assert np.allclose(fft(fft(x), inverse=True), x, atol=1e-12)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-12), (np.longdouble, 1e-15)])
def test_round_trip_by_precision(rng, dtype, tol):
    x = rng.normal(size=(3, 8, 16)).astype(dtype)
    y = ifft2(fft2(x), 16)
    assert y.dtype == dtype
    assert np.max(np.abs(y - x)) < tol


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_round_trip_property(eh, ew, seed):
    h, w = 2 ** eh, 2 ** ew
    x = np.random.default_rng(seed).normal(size=(h, w))
    assert np.max(np.abs(ifft2(fft2(x), w) - x)) < 1e-6


def test_hermitian_extension_reconstructs_full_spectrum(rng):
    x = rng.normal(size=(4, 8))
    assert np.allclose(hermitian_extend(fft2(x), 8), fft2_full(x), atol=1e-12)
    with pytest.raises(ValueError):
        hermitian_extend(fft2(x), 16)


def test_dc_bin_is_sum_and_delta_is_flat(rng):
    x = rng.normal(size=(8, 8))
    assert np.isclose(fft2(x)[0, 0].real, x.sum())
    delta = np.zeros((4, 4))
    delta[0, 0] = 1.0
    assert np.allclose(fft2(delta), 1.0)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        fft2(np.zeros((6, 8)))
    with pytest.raises(ValueError):
        fft2(np.zeros((4, 4), dtype=complex))
