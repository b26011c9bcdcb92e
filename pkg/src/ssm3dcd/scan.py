"""Selective-scan (S6) recurrence: discretization, reference and parallel kernels.

The recurrence, per channel d and state n, is

    h_t = a_t * h_{t-1} + u_t,     h_{-1} = 0
    y_t = sum_n c_t[n] * h_t[d, n] + d_skip[d] * x_t[d]

with ``a_t = exp(-delta_t * exp(a_log))`` and ``u_t = delta_t * B_t * x_t``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import tensor as T
from .tensor import Linear, Module, Parameter, Tensor

KERNELS = ("sequential", "parallel")


# ------------------------------------------------------------ raw kernels


def recurrence_sequential(a: np.ndarray, u: np.ndarray, axis: int = 0) -> np.ndarray:
    """h_t = a_t * h_{t-1} + u_t, accumulated strictly left to right."""
    a = np.moveaxis(np.asarray(a), axis, 0)
    u = np.moveaxis(np.asarray(u), axis, 0)
    if a.shape != u.shape:
        raise ValueError(f"recurrence: a shape {a.shape} != u shape {u.shape}")
    h = np.empty(np.broadcast_shapes(a.shape, u.shape), dtype=np.result_type(a, u))
    state = np.zeros(h.shape[1:], dtype=h.dtype)
    for t in range(h.shape[0]):
        state = a[t] * state + u[t]
        h[t] = state
    return np.moveaxis(h, 0, axis)


def _blelloch(a: np.ndarray, u: np.ndarray):
    """Inclusive affine prefixes of a power-of-two block via up-sweep/down-sweep.

    Element t is the map h -> a_t h + u_t; prefix t composes elements 0..t.
    Returns the (multiplier, offset) pair of every inclusive prefix.
    """
    n = a.shape[0]
    A = a.copy()
    U = u.copy()
    step = 1
    while step < n:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        U[right] = A[right] * U[left] + U[right]
        A[right] = A[right] * A[left]
        step *= 2
    A[n - 1] = 1
    U[n - 1] = 0
    step = n // 2
    while step >= 1:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        tot_a = A[left].copy()
        tot_u = U[left].copy()
        A[left] = A[right]
        U[left] = U[right]
        # right child sees the prefix, then the left subtree
        U[right] = tot_a * U[right] + tot_u
        A[right] = tot_a * A[right]
        step //= 2
    # exclusive -> inclusive
    return a * A, a * U + u


def _pow2_chunks(n: int) -> list:
    sizes = []
    bit = 1 << (n.bit_length() - 1) if n else 0
    while bit:
        if n & bit:
            sizes.append(bit)
        bit >>= 1
    return sizes


def recurrence_parallel(a: np.ndarray, u: np.ndarray, axis: int = 0) -> np.ndarray:
    """Same result as :func:`recurrence_sequential` via a work-efficient scan.

    L is split into descending power-of-two chunks (its binary expansion); each
    chunk is scanned with Blelloch's two passes and the running state is
    carried across chunk boundaries.  The tree shape depends on L only.
    """
    a = np.moveaxis(np.asarray(a), axis, 0)
    u = np.moveaxis(np.asarray(u), axis, 0)
    if a.shape != u.shape:
        raise ValueError(f"recurrence: a shape {a.shape} != u shape {u.shape}")
    L = a.shape[0]
    h = np.empty(a.shape, dtype=np.result_type(a, u))
    start = 0
    carry = None
    for size in _pow2_chunks(L):
        stop = start + size
        mult, offset = _blelloch(a[start:stop], u[start:stop])
        h[start:stop] = offset if carry is None else mult * carry + offset
        carry = h[stop - 1]
        start = stop
    return np.moveaxis(h, 0, axis)


def recurrence(a: np.ndarray, u: np.ndarray, kernel: str = "parallel", axis: int = 0) -> np.ndarray:
    if kernel == "parallel":
        return recurrence_parallel(a, u, axis)
    if kernel == "sequential":
        return recurrence_sequential(a, u, axis)
    raise ValueError(f"unknown scan kernel {kernel!r}; expected one of {KERNELS}")


def _check_scan_inputs(a_bar, bx, c, x):
    a_bar, bx, c, x = (np.asarray(v) for v in (a_bar, bx, c, x))
    if a_bar.shape != bx.shape:
        raise ValueError(f"scan: a_bar shape {a_bar.shape} != b_bar*x shape {bx.shape}")
    lead = a_bar.shape[:-2]
    if c.shape != lead + (a_bar.shape[-1],):
        raise ValueError(f"scan: c shape {c.shape} does not match token/state dims of {a_bar.shape}")
    if x.shape != a_bar.shape[:-1]:
        raise ValueError(f"scan: x shape {x.shape} does not match {a_bar.shape[:-1]}")
    return a_bar, bx, c, x


def _scan(a_bar, bx, c, d_skip, x, kernel: str, return_state: bool):
    a_bar, bx, c, x = _check_scan_inputs(a_bar, bx, c, x)
    h = recurrence(a_bar, bx, kernel, axis=a_bar.ndim - 3)
    y = np.einsum("...dn,...n->...d", h, c) + np.asarray(d_skip) * x
    return (y, h) if return_state else y


def scan_sequential(a_bar, bx, c, d_skip, x, return_state: bool = False):
    """Reference S6 output for arrays ``a_bar, bx: (..., L, D, N)``, ``c: (..., L, N)``, ``x: (..., L, D)``."""
    return _scan(a_bar, bx, c, d_skip, x, "sequential", return_state)


def scan_parallel(a_bar, bx, c, d_skip, x, return_state: bool = False):
    """Parallel-kernel S6 output; agrees with :func:`scan_sequential` to rounding."""
    return _scan(a_bar, bx, c, d_skip, x, "parallel", return_state)


# ------------------------------------------------------- differentiable


def discretize(delta, a_log, b):
    """Zero-order hold for the state matrix, Euler step for the input.

    ``delta (..., D)``, ``a_log (D, N)``, ``b (..., N)`` give
    ``a_bar = exp(-delta * exp(a_log))`` and ``b_bar = delta * b``, both
    ``(..., D, N)``.  Tensors in, tensors out; arrays in, arrays out.
    """
    as_arrays = not any(isinstance(v, Tensor) for v in (delta, a_log, b))
    delta, a_log, b = (T.as_tensor(v) for v in (delta, a_log, b))
    if np.any(delta.data <= 0):
        raise ValueError("discretize: step size delta must be > 0")
    d_col = T.reshape(delta, delta.shape + (1,))
    a_bar = T.exp(d_col * T.neg(T.exp(a_log)))
    b_bar = d_col * T.reshape(b, b.shape[:-1] + (1, b.shape[-1]))
    if as_arrays:
        return a_bar.data, b_bar.data
    return a_bar, b_bar


@njit(cache=True, error_model="numpy")
def _fused_forward(x, delta, b, c, a_bar, h, y):
    Bn, L, D = x.shape
    N = b.shape[2]
    zero = x.dtype.type(0)
    for i in range(Bn):
        for t in range(L):
            for d in range(D):
                dl = delta[i, t, d]
                dx = dl * x[i, t, d]
                acc = zero
                for n in range(N):
                    a = a_bar[i, t, d, n]
                    prev = h[i, t - 1, d, n] if t > 0 else zero
                    s = a * prev + dx * b[i, t, n]
                    h[i, t, d, n] = s
                    acc += c[i, t, n] * s
                y[i, t, d] = acc


@njit(cache=True, error_model="numpy")
def _fused_backward(x, delta, A, b, c, a_bar, h, gy, gx, gdelta, gA, gb, gc):
    Bn, L, D = x.shape
    N = A.shape[1]
    zero = x.dtype.type(0)
    carry = np.zeros((D, N), dtype=x.dtype)
    for i in range(Bn):
        carry[:] = 0
        for t in range(L - 1, -1, -1):
            for d in range(D):
                dl = delta[i, t, d]
                xv = x[i, t, d]
                dx = dl * xv
                g = gy[i, t, d]
                g_dx = zero
                g_dl = zero
                for n in range(N):
                    gh = carry[d, n] + c[i, t, n] * g
                    gc[i, t, n] += h[i, t, d, n] * g
                    g_dx += gh * b[i, t, n]
                    gb[i, t, n] += gh * dx
                    a = a_bar[i, t, d, n]
                    if t > 0:
                        gs = gh * h[i, t - 1, d, n] * a
                        g_dl += gs * A[d, n]
                        gA[d, n] += gs * dl
                    carry[d, n] = a * gh
                gx[i, t, d] = g_dx * dl
                gdelta[i, t, d] = g_dl + g_dx * xv


def _use_compiled(kernel: str, *arrays) -> bool:
    return kernel == "sequential" and all(a.dtype in (np.float32, np.float64) for a in arrays) and \
        len({a.dtype for a in arrays}) == 1


def selective_scan(x: Tensor, delta: Tensor, a_log: Tensor, b: Tensor, c: Tensor, kernel: str = "sequential") -> Tensor:
    """Differentiable S6 core without the skip term, fused for speed.

    ``x, delta: (B, L, D)``, ``a_log: (D, N)``, ``b, c: (B, L, N)``.  Computes
    ``y_t = sum_n c_t[n] h_t[:, n]`` with ``h`` from :func:`discretize`.  The
    adjoint state obeys the same recurrence run right to left,
    ``g_t = a_{t+1} g_{t+1} + c_t * dy_t``.

    The sequential kernel runs compiled loops for float32/float64 and the numpy
    reference loop otherwise; the parallel kernel always uses numpy.
    """
    if kernel not in KERNELS:
        raise ValueError(f"unknown scan kernel {kernel!r}; expected one of {KERNELS}")
    if np.any(delta.data <= 0):
        raise ValueError("selective_scan: step size delta must be > 0")
    xd, dd, bd, cd = (np.ascontiguousarray(v.data) for v in (x, delta, b, c))
    A = -np.exp(a_log.data)
    if _use_compiled(kernel, xd, dd, bd, cd, A):
        h = np.empty(xd.shape + (A.shape[1],), dtype=xd.dtype)
        a_bar = np.exp(dd[..., None] * A)
        y = np.empty_like(xd)
        _fused_forward(xd, dd, bd, cd, a_bar, h, y)

        def backward(gy):
            gy = np.ascontiguousarray(gy, dtype=xd.dtype)
            gx, gdelta = np.empty_like(xd), np.empty_like(xd)
            gA = np.zeros_like(A)
            gb, gc = np.zeros_like(bd), np.zeros_like(cd)
            _fused_backward(xd, dd, A, bd, cd, a_bar, h, gy, gx, gdelta, gA, gb, gc)
            return gx, gdelta, gA * A, gb, gc

        return T._node(y, (x, delta, a_log, b, c), backward)

    a_bar = np.exp(dd[..., None] * A)
    dx = dd * xd
    u = dx[..., None] * bd[:, :, None, :]
    h = recurrence(a_bar, u, kernel, axis=1)
    y = np.einsum("bldn,bln->bld", h, cd)

    def backward(gy):
        drive = gy[..., None] * cd[:, :, None, :]
        a_next = np.empty_like(a_bar)
        a_next[:, :-1] = a_bar[:, 1:]
        a_next[:, -1] = 1
        gh = recurrence(a_next[:, ::-1], drive[:, ::-1], kernel, axis=1)[:, ::-1]
        gc = np.einsum("bldn,bld->bln", h, gy)
        g_dx = np.einsum("bldn,bln->bld", gh, bd)
        gb = np.einsum("bldn,bld->bln", gh, dx)
        # d/ds of a_bar = exp(s), s = delta * A, needs h_{t-1}
        gs = np.empty_like(gh)
        gs[:, 0] = 0
        np.multiply(gh[:, 1:], h[:, :-1], out=gs[:, 1:])
        gs *= a_bar
        gdelta = np.einsum("bldn,dn->bld", gs, A) + g_dx * xd
        ga_log = np.einsum("bldn,bld->dn", gs, dd) * A
        return g_dx * dd, gdelta, ga_log, gb, gc

    return T._node(y, (x, delta, a_log, b, c), backward)


class ScanParams(Module):
    """S6 parameters for feature width ``d`` and state size ``n``."""

    def __init__(self, rng: np.random.Generator, d: int, n: int = 8, dtype=np.float32):
        self.d = d
        self.n = n
        self.rank = max(1, d // 16)
        self.delta_down = Linear(rng, d, self.rank, bias=False, dtype=dtype)
        self.delta_up = Linear(rng, self.rank, d, bias=True, dtype=dtype)
        # step sizes start log-uniform in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        self.delta_up.bias.assign((dt + np.log(-np.expm1(-dt))).astype(dtype))
        self.b_proj = Linear(rng, d, n, bias=False, dtype=dtype)
        self.c_proj = Linear(rng, d, n, bias=False, dtype=dtype)
        self.a_log = Parameter(np.log(np.tile(np.arange(1, n + 1, dtype=np.float64), (d, 1))).astype(dtype))
        self.d_skip = Parameter(np.ones(d, dtype=dtype))


def s6_forward(x: Tensor, p: ScanParams, kernel: str = "sequential") -> Tensor:
    """Selective scan over ``x (B, L, D)`` with input-dependent delta, B and C."""
    if x.shape[-1] != p.d:
        raise ValueError(f"s6_forward: input width {x.shape[-1]} (shape {x.shape}) != scan width {p.d}")
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    delta = T.softplus(p.delta_up(p.delta_down(x)))
    y = selective_scan(x, delta, p.a_log, p.b_proj(x), p.c_proj(x), kernel) + x * p.d_skip
    return T.reshape(y, y.shape[1:]) if squeeze else y
