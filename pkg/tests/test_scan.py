import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssm3dcd import tensor as T
from ssm3dcd.gradcheck import grad_check
from ssm3dcd.scan import (
    ScanParams,
    discretize,
    recurrence_parallel,
    recurrence_sequential,
    s6_forward,
    scan_parallel,
    scan_sequential,
    selective_scan,
)
from conftest import WIDE, leaf, probe_loss


def s6_dense(x, delta, a_log, b, c, d_skip):
    """Token-by-token S6 with explicit per-element discretization."""
    L, D = x.shape
    N = a_log.shape[1]
    h = np.zeros((D, N), dtype=x.dtype)
    y = np.zeros_like(x)
    for t in range(L):
        for d in range(D):
            for n in range(N):
                a_bar = np.exp(-delta[t, d] * np.exp(a_log[d, n]))
                h[d, n] = a_bar * h[d, n] + delta[t, d] * b[t, n] * x[t, d]
            y[t, d] = sum(c[t, n] * h[d, n] for n in range(N)) + d_skip[d] * x[t, d]
    return y


def random_problem(rng, L, D, N, dtype=np.float64):
    x = rng.normal(size=(L, D)).astype(dtype)
    delta = rng.uniform(0.05, 1.0, (L, D)).astype(dtype)
    a_log = rng.normal(0, 0.5, (D, N)).astype(dtype)
    b = rng.normal(size=(L, N)).astype(dtype)
    c = rng.normal(size=(L, N)).astype(dtype)
    d_skip = rng.normal(size=D).astype(dtype)
    return x, delta, a_log, b, c, d_skip


def test_recurrence_kernels_match_loop(rng):
    for L in (1, 2, 3, 7, 8, 13, 64, 100):
        a = rng.uniform(0.2, 1.0, (L, 3))
        u = rng.normal(size=(L, 3))
        ref = np.zeros_like(u)
        h = np.zeros(3)
        for t in range(L):
            h = a[t] * h + u[t]
            ref[t] = h
        assert np.allclose(recurrence_sequential(a, u), ref, atol=1e-13)
        assert np.allclose(recurrence_parallel(a, u), ref, atol=1e-13)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**31 - 1))
def test_parallel_equals_sequential_on_any_length(L, seed):
    r = np.random.default_rng(seed)
    a = r.uniform(0.0, 1.0, (2, L, 2))
    u = r.normal(size=(2, L, 2))
    assert np.max(np.abs(recurrence_parallel(a, u, axis=1) - recurrence_sequential(a, u, axis=1))) < 1e-12


@pytest.mark.parametrize("kernel", ["sequential", "parallel"])
def test_scan_kernels_match_dense_s6(rng, kernel):
    x, delta, a_log, b, c, d_skip = random_problem(rng, 9, 3, 4)
    a_bar, b_bar = discretize(delta, a_log, b)
    fn = scan_sequential if kernel == "sequential" else scan_parallel
    y = fn(a_bar, b_bar * x[..., None], c, d_skip, x)
    assert np.allclose(y, s6_dense(x, delta, a_log, b, c, d_skip), atol=1e-12)


def test_zero_input_gives_zero_output(rng):
    x, delta, a_log, b, c, d_skip = random_problem(rng, 6, 2, 3)
    a_bar, _ = discretize(delta, a_log, b)
    y = scan_parallel(a_bar, np.zeros_like(a_bar), c, d_skip, np.zeros_like(x))
    assert np.array_equal(y, np.zeros_like(x))


def test_impulse_response_decays_geometrically():
    L, N = 6, 1
    a_bar = np.full((L, 1, N), 0.5)
    bx = np.zeros((L, 1, N))
    bx[0] = 1.0
    y = scan_sequential(a_bar, bx, np.ones((L, N)), np.zeros(1), np.zeros((L, 1)))
    assert np.allclose(y[:, 0], 0.5 ** np.arange(L))


def test_discretize_contract(rng):
    x, delta, a_log, b, _, _ = random_problem(rng, 4, 2, 3)
    a_bar, b_bar = discretize(delta, a_log, b)
    assert a_bar.shape == b_bar.shape == (4, 2, 3)
    assert ((a_bar > 0) & (a_bar < 1)).all()
    assert np.allclose(b_bar, delta[..., None] * b[:, None, :])
    with pytest.raises(ValueError):
        discretize(np.zeros_like(delta), a_log, b)


def test_scan_shape_errors(rng):
    a = np.ones((5, 2, 3))
    with pytest.raises(ValueError, match="c shape"):
        scan_sequential(a, a, np.ones((5, 4)), np.ones(2), np.ones((5, 2)))
    with pytest.raises(ValueError):
        scan_parallel(a, a[:, :, :2], np.ones((5, 3)), np.ones(2), np.ones((5, 2)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_kernel_matches_numpy_path(rng, dtype):
    B, L, D, N = 2, 37, 5, 4
    data = [rng.normal(size=(B, L, D)), rng.uniform(0.05, 1.0, (B, L, D)), rng.normal(0, 0.5, (D, N)),
            rng.normal(size=(B, L, N)), rng.normal(size=(B, L, N))]
    gy = rng.normal(size=(B, L, D)).astype(dtype)
    results = {}
    for kernel in ("sequential", "parallel"):
        ts = [T.Parameter(v.astype(dtype)) for v in data]
        y = selective_scan(*ts, kernel=kernel)
        y.backward(gy)
        results[kernel] = [y.data] + [t.grad for t in ts]
    tol = 1e-4 if dtype == np.float32 else 1e-11
    for seq, par in zip(results["sequential"], results["parallel"]):
        assert np.max(np.abs(seq - par)) / (np.max(np.abs(par)) + 1e-30) < tol


def test_selective_scan_matches_dense_oracle(rng):
    x, delta, a_log, b, c, _ = random_problem(rng, 11, 3, 2)
    y = selective_scan(T.Tensor(x[None]), T.Tensor(delta[None]), T.Tensor(a_log), T.Tensor(b[None]), T.Tensor(c[None]))
    assert np.allclose(y.data[0], s6_dense(x, delta, a_log, b, c, np.zeros(3)), atol=1e-12)


@pytest.mark.parametrize("kernel", ["sequential", "parallel"])
def test_selective_scan_gradients_widest(rng, kernel):
    B, L, D, N = 2, 6, 3, 2
    x = leaf(rng, (B, L, D))
    delta = T.Parameter(rng.uniform(0.1, 1.0, (B, L, D)).astype(WIDE))
    a_log = leaf(rng, (D, N), scale=0.5)
    b = leaf(rng, (B, L, N))
    c = leaf(rng, (B, L, N))
    err = grad_check(lambda: probe_loss(selective_scan(x, delta, a_log, b, c, kernel)), [x, delta, a_log, b, c])
    assert err < 1e-6


def test_s6_forward_gradients_widest(rng):
    p = ScanParams(rng, 4, 3, dtype=WIDE)
    x = leaf(rng, (2, 5, 4))
    assert grad_check(lambda: probe_loss(s6_forward(x, p)), [x] + p.parameters()) < 1e-6


def test_s6_forward_rank2_and_width_error(rng):
    p = ScanParams(rng, 4, 3, dtype=np.float64)
    x = rng.normal(size=(5, 4))
    assert np.allclose(s6_forward(T.Tensor(x), p).data, s6_forward(T.Tensor(x[None]), p).data[0])
    with pytest.raises(ValueError, match="width"):
        s6_forward(T.Tensor(rng.normal(size=(5, 3))), p)


def test_scan_params_init(rng):
    p = ScanParams(rng, 32, 8)
    dt = np.log1p(np.exp(p.delta_up.bias.data.astype(np.float64)))
    assert (dt > 0.9e-3).all() and (dt < 1.1e-1).all()
    assert np.allclose(np.exp(p.a_log.data[0]), np.arange(1, 9), rtol=1e-6)
    assert p.delta_down.weight.shape == (32, 2)
