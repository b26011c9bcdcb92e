"""Spatiotemporal interaction between two co-registered feature maps.

Each temporal map yields a global feature (3D selective scan) and a local
feature (conv-SiLU-conv).  Each global feature is re-weighted by the channel
softmax of the other time's global and local features; the two enhanced maps
are mixed by a dynamic gate, and the result is the elementwise absolute
difference of the two mixed maps.  All parameters are shared between times.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .ssm3d import Ssm3dParams
from .tensor import Conv2d, Linear, Module, Tensor


class SimParams(Module):
    def __init__(self, rng, shape, global_scan: Module | None = None, planes=("HW", "HC", "WC"), d_state: int = 8,
                 gate_softmax: bool = False, dtype=np.float32):
        C = shape[-1]
        self.shape = tuple(shape)
        self.ssm3d = global_scan if global_scan is not None else Ssm3dParams(rng, shape, planes, d_state, dtype=dtype)
        self.local1 = Conv2d(rng, C, C, 3, padding=1, dtype=dtype)
        self.local2 = Conv2d(rng, C, C, 3, padding=1, dtype=dtype)
        self.gate = Linear(rng, 2 * C, 2, dtype=dtype)
        # start as a plain average of the two inputs
        self.gate.weight.assign(self.gate.weight.data * 0.1)
        self.gate.bias.assign(np.full(2, 0.5, dtype=dtype))
        self.gate_softmax = gate_softmax


def extract_global_local(F: Tensor, p: SimParams, kernel: str = "sequential"):
    F = T.as_tensor(F)
    if F.shape[-1] != p.shape[-1]:
        raise ValueError(f"extract_global_local: map shape {F.shape} has {F.shape[-1]} channels, module expects {p.shape[-1]}")
    F_G = p.ssm3d(F, kernel)
    F_L = p.local2(T.silu(p.local1(F)))
    return F_G, F_L


def dynamic_gate(F1: Tensor, F2: Tensor, gate: Linear, normalize: bool = False) -> Tensor:
    """alpha1 * F1 + alpha2 * F2 with [alpha1, alpha2] = gate([mean(F1), mean(F2)]).

    ``mean`` is the spatial mean per channel, so the gate sees a 2C vector per
    sample.  ``normalize`` passes the two coefficients through a softmax.
    """
    F1, F2 = T.as_tensor(F1), T.as_tensor(F2)
    if F1.shape != F2.shape:
        raise ValueError(f"dynamic_gate: shapes differ, {F1.shape} vs {F2.shape}")
    squeeze = F1.ndim == 3
    if squeeze:
        F1 = T.reshape(F1, (1,) + F1.shape)
        F2 = T.reshape(F2, (1,) + F2.shape)
    B = F1.shape[0]
    m = T.concat([T.mean(F1, axis=(1, 2)), T.mean(F2, axis=(1, 2))], axis=-1)
    alpha = gate(m)
    if normalize:
        alpha = T.softmax_channels(alpha)
    a1, a2 = T.split(alpha, [1, 1], axis=-1)
    out = F1 * T.reshape(a1, (B, 1, 1, 1)) + F2 * T.reshape(a2, (B, 1, 1, 1))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def sim_forward(F1: Tensor, F2: Tensor, p: SimParams, kernel: str = "sequential") -> Tensor:
    F1, F2 = T.as_tensor(F1), T.as_tensor(F2)
    if F1.shape != F2.shape:
        raise ValueError(f"sim_forward: temporal shapes differ, {F1.shape} vs {F2.shape}")
    G1, L1 = extract_global_local(F1, p, kernel)
    G2, L2 = extract_global_local(F2, p, kernel)
    GL1 = _enhance(G1, G2, L2, p)
    GL2 = _enhance(G2, G1, L1, p)
    return T.tabs(GL1 - GL2)


def _enhance(G_self: Tensor, G_other: Tensor, L_other: Tensor, p: SimParams) -> Tensor:
    a = T.softmax_channels(G_other) * G_self
    b = T.softmax_channels(L_other) * G_self
    return dynamic_gate(a, b, p.gate, p.gate_softmax)
