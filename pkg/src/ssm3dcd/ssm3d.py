"""Three-plane selective scanning (HW, HC, WC) over a feature map.

A plane names the two axes that are flattened into tokens; the third axis
becomes the feature axis of the sequence:

    HW: tokens (h, w), features c  -> (H*W, C)
    HC: tokens (w, c), features h  -> (W*C, H)
    WC: tokens (h, c), features w  -> (H*C, W)

The first listed token axis varies slowest.  ``transposed=True`` swaps which
token axis varies fastest (column-major order for HW).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .scan import ScanParams, s6_forward
from .tensor import LayerNorm, Linear, Module, Parameter, Tensor, uniform_init

PLANES = ("HW", "HC", "WC")

# (slow token axis, fast token axis, feature axis) in (H, W, C) = (0, 1, 2)
_AXES = {"HW": (0, 1, 2), "HC": (1, 2, 0), "WC": (0, 2, 1)}


@dataclass(frozen=True)
class PlaneOrdering:
    plane: str
    transposed: bool = False

    def __post_init__(self):
        if self.plane not in PLANES:
            raise ValueError(f"unknown plane {self.plane!r}; expected one of {PLANES}")

    def axes(self) -> tuple:
        slow, fast, feat = _AXES[self.plane]
        return (fast, slow, feat) if self.transposed else (slow, fast, feat)


def feature_width(plane: str, shape) -> int:
    """Sequence feature width of ``plane`` for a map of spatial/channel ``shape`` (H, W, C)."""
    return shape[_AXES[plane][2]]


def flatten_plane(F: Tensor, ordering: PlaneOrdering) -> Tensor:
    """(B, H, W, C) -> (B, L, D) for the given ordering; rank-3 maps give (L, D)."""
    F = T.as_tensor(F)
    if F.ndim == 3:
        return T.reshape(flatten_plane(T.reshape(F, (1,) + F.shape), ordering), _seq_shape(F.shape, ordering))
    a, b, c = ordering.axes()
    X = T.transpose(F, (0, a + 1, b + 1, c + 1))
    B, n1, n2, d = X.shape
    return T.reshape(X, (B, n1 * n2, d))


def _seq_shape(shape, ordering):
    a, b, c = ordering.axes()
    return (shape[a] * shape[b], shape[c])


def unflatten_plane(S: Tensor, ordering: PlaneOrdering, shape) -> Tensor:
    """Inverse of :func:`flatten_plane`; ``shape`` is the (H, W, C) of the map."""
    S = T.as_tensor(S)
    shape = tuple(shape)
    if len(shape) != 3:
        raise ValueError(f"unflatten_plane: shape must be (H, W, C), got {shape}")
    expect = _seq_shape(shape, ordering)
    if S.ndim == 2:
        if S.shape != expect:
            raise ValueError(f"unflatten_plane: sequence shape {S.shape} inconsistent with {ordering} and map shape {shape}")
        out = unflatten_plane(T.reshape(S, (1,) + S.shape), ordering, shape)
        return T.reshape(out, shape)
    if S.shape[1:] != expect:
        raise ValueError(f"unflatten_plane: sequence shape {S.shape} inconsistent with {ordering} and map shape {shape}")
    a, b, c = ordering.axes()
    X = T.reshape(S, (S.shape[0], shape[a], shape[b], shape[c]))
    order = (a, b, c)
    inverse = tuple(int(i) for i in np.argsort(order))
    return T.transpose(X, (0,) + tuple(i + 1 for i in inverse))


class VmeParams(Module):
    """Bidirectional selective-scan block over sequences of width ``d_model``."""

    def __init__(self, rng, d_model: int, d_state: int = 8, expand: int = 2, conv_width: int = 3, dtype=np.float32):
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.norm = LayerNorm(d_model, dtype=dtype)
        self.in_proj = Linear(rng, d_model, self.d_inner, dtype=dtype)
        self.gate_proj = Linear(rng, d_model, self.d_inner, dtype=dtype)
        self.dw_conv = Parameter(uniform_init(rng, (conv_width, self.d_inner), conv_width, dtype))
        self.dw_bias = Parameter(np.zeros(self.d_inner, dtype=dtype))
        self.scan_fwd = ScanParams(rng, self.d_inner, d_state, dtype)
        self.scan_bwd = ScanParams(rng, self.d_inner, d_state, dtype)
        self.out_proj = Linear(rng, self.d_inner, d_model, dtype=dtype)


def vme_block(X: Tensor, p: VmeParams, kernel: str = "sequential") -> Tensor:
    """norm -> (x, z) -> SiLU(dwconv x) -> forward + reversed S6 -> gate SiLU(z) -> out."""
    X = T.as_tensor(X)
    if X.shape[-1] != p.d_model:
        raise ValueError(f"vme_block: sequence shape {X.shape} has width {X.shape[-1]}, block expects {p.d_model}")
    squeeze = X.ndim == 2
    if squeeze:
        X = T.reshape(X, (1,) + X.shape)
    u = p.norm(X)
    x = T.silu(T.depthwise_conv1d(p.in_proj(u), p.dw_conv, p.dw_bias))
    z = p.gate_proj(u)
    fwd = s6_forward(x, p.scan_fwd, kernel)
    bwd = T.flip(s6_forward(T.flip(x, 1), p.scan_bwd, kernel), 1)
    out = p.out_proj((fwd + bwd) * T.silu(z))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def plane_scan(F: Tensor, p: VmeParams, plane: str, kernel: str = "sequential") -> Tensor:
    """VME over the plane's ordering and its transpose (shared params), summed in map space."""
    F = T.as_tensor(F)
    squeeze = F.ndim == 3
    if squeeze:
        F = T.reshape(F, (1,) + F.shape)
    shape = F.shape[1:]
    B = F.shape[0]
    natural = PlaneOrdering(plane, False)
    swapped = PlaneOrdering(plane, True)
    # both orderings ride one batch so the block runs once
    seq = T.concat([flatten_plane(F, natural), flatten_plane(F, swapped)], axis=0)
    out = vme_block(seq, p, kernel)
    first, second = T.split(out, [B, B], axis=0)
    result = unflatten_plane(first, natural, shape) + unflatten_plane(second, swapped, shape)
    return T.reshape(result, shape) if squeeze else result


class Ssm3dParams(Module):
    """One :class:`VmeParams` per enabled plane, sized for a map of ``shape`` (H, W, C)."""

    def __init__(self, rng, shape, planes=PLANES, d_state: int = 8, expand: int = 2, dtype=np.float32):
        requested = set(planes)
        if not requested or requested - set(PLANES):
            raise ValueError(f"Ssm3dParams needs a non-empty subset of {PLANES}, got {sorted(requested)}")
        planes = tuple(p for p in PLANES if p in requested)
        self.shape = tuple(shape)
        self.planes = planes
        self.vme = {pl: VmeParams(rng, feature_width(pl, self.shape), d_state, expand, dtype=dtype) for pl in planes}

    def __call__(self, F: Tensor, kernel: str = "sequential") -> Tensor:
        return ssm3d(F, self, kernel)


def ssm3d(F: Tensor, p: Ssm3dParams, kernel: str = "sequential") -> Tensor:
    """Sum of plane scans over the enabled planes, in HW, HC, WC order."""
    if not p.planes:
        raise ValueError("ssm3d: no planes enabled")
    F = T.as_tensor(F)
    if tuple(F.shape[-3:]) != p.shape:
        raise ValueError(f"ssm3d: map shape {F.shape} does not match parameter shape {p.shape}")
    out = None
    for plane in PLANES:
        if plane in p.planes:
            term = plane_scan(F, p.vme[plane], plane, kernel)
            out = term if out is None else out + term
    return out
