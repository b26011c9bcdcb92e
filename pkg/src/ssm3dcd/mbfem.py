"""Multi-branch decoder block: scaling, FFT, convolution and 3D-scan branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fft import fft2_full, is_pow2
from .ssm3d import Ssm3dParams
from .tensor import Conv2d, LayerNorm, Linear, Module, Parameter, Tensor

BRANCHES = ("FFT", "Conv", "SSM3D")


@dataclass(frozen=True)
class PatchGrid:
    patch_h: int
    patch_w: int

    def __post_init__(self):
        for n in (self.patch_h, self.patch_w):
            if n < 2 or not is_pow2(n):
                raise ValueError(f"patch dims must be powers of two >= 2, got {self.patch_h}x{self.patch_w}")

    @classmethod
    def fit(cls, H: int, W: int, patch: int = 8) -> "PatchGrid":
        """Largest grid up to ``patch`` that does not exceed the map (after rounding up to a power of two)."""

        def side(n):
            return max(2, min(patch, 1 << max(0, (n - 1).bit_length())))

        return cls(side(H), side(W))

    def padding(self, H: int, W: int) -> tuple:
        return (-H) % self.patch_h, (-W) % self.patch_w


def full_gain(W: np.ndarray, pw: int) -> np.ndarray:
    """Extend a ``(ph, pw//2+1, C)`` gain to all ``pw`` columns by mirror symmetry."""
    ph = W.shape[0]
    rows = (-np.arange(ph)) % ph
    cols = np.arange(pw // 2 + 1, pw)
    return np.concatenate([W, W[rows][:, pw - cols]], axis=1)


def _fold_gain_grad(g_full: np.ndarray, pw: int) -> np.ndarray:
    ph = g_full.shape[0]
    g = g_full[:, : pw // 2 + 1].copy()
    rows = (-np.arange(ph)) % ph
    cols = np.arange(pw // 2 + 1, pw)
    np.add.at(g, (rows[:, None], (pw - cols)[None, :]), g_full[:, cols])
    return g


def spectral_filter(patches: Tensor, W: Tensor) -> Tensor:
    """Re(ifft2(fft2(x) * W)) per patch for ``patches (..., C, ph, pw)``.

    ``W (ph, pw//2+1, C)`` is a real gain on the stored half spectrum; the
    mirrored half reuses it.  The map is self-adjoint in the patch input.
    """
    ph, pw = patches.shape[-2:]
    if W.shape != (ph, pw // 2 + 1, patches.shape[-3]):
        raise ValueError(f"spectral_filter: gain shape {W.shape} does not match patches {patches.shape}")
    gain = np.moveaxis(full_gain(W.data, pw), -1, 0)  # (C, ph, pw)
    X = fft2_full(patches.data)
    out = fft2_full(X * gain, inverse=True).real.astype(patches.dtype)

    def backward(g):
        G = fft2_full(g)
        gx = fft2_full(G * gain, inverse=True).real.astype(g.dtype)
        prod = (X * np.conj(G)).real / (ph * pw)
        lead = tuple(range(prod.ndim - 3))
        g_full = np.moveaxis(prod.sum(axis=lead), 0, -1)
        return gx, _fold_gain_grad(g_full, pw).astype(W.dtype)

    return T._node(out, (patches, W), backward)


def unfold_patches(F: Tensor, grid: PatchGrid) -> Tensor:
    """(B, H, W, C) -> (B, nH, nW, C, ph, pw) for maps divisible by the grid."""
    B, H, W, C = F.shape
    ph, pw = grid.patch_h, grid.patch_w
    X = T.reshape(F, (B, H // ph, ph, W // pw, pw, C))
    return T.transpose(X, (0, 1, 3, 5, 2, 4))


def fold_patches(P: Tensor) -> Tensor:
    B, nH, nW, C, ph, pw = P.shape
    X = T.transpose(P, (0, 1, 4, 2, 5, 3))
    return T.reshape(X, (B, nH * ph, nW * pw, C))


def geglu(x: Tensor) -> Tensor:
    """First channel half gated by GELU of the second half."""
    C = x.shape[-1]
    if C % 2:
        raise ValueError(f"geglu needs an even channel count, got {C}")
    a, b = T.split(x, [C // 2, C // 2], axis=-1)
    return a * T.gelu(b)


class MbfemParams(Module):
    """Decoder block fusing a ``c_prev``-channel deeper map into a ``(H, W, C)`` SIM map."""

    def __init__(self, rng, c_prev: int, shape, branches=BRANCHES, global_scan: Module | None = None,
                 planes=("HW", "HC", "WC"), d_state: int = 8, patch: int = 8, dtype=np.float32):
        H, W, C = shape
        if C % 2:
            raise ValueError(f"MBFEM channel count must be even for GEGLU, got {C}")
        requested = set(branches)
        if requested - set(BRANCHES):
            raise ValueError(f"unknown MBFEM branches {sorted(requested - set(BRANCHES))}; expected a subset of {BRANCHES}")
        self.shape = tuple(shape)
        self.branches = tuple(b for b in BRANCHES if b in requested)
        self.grid = PatchGrid.fit(H, W, patch)
        self.fuse_1x1 = Linear(rng, c_prev, C, dtype=dtype)
        self.norm1 = LayerNorm(C, dtype=dtype)
        self.branch_linear_in = Linear(rng, C, C, dtype=dtype)
        self.beta = Parameter(np.ones(1, dtype=dtype))
        self.norm2 = LayerNorm(C, dtype=dtype)
        self.branch_linear_out = Linear(rng, C, C, dtype=dtype)
        if "FFT" in self.branches:
            g = self.grid
            self.fft_pre = Linear(rng, C, C, dtype=dtype)
            self.fft_gain = Parameter(np.ones((g.patch_h, g.patch_w // 2 + 1, C), dtype=dtype))
            self.fft_proj = Linear(rng, C // 2, C, dtype=dtype)
        if "Conv" in self.branches:
            self.conv1 = Conv2d(rng, C, C, 3, padding=1, dtype=dtype)
            self.conv2 = Conv2d(rng, C, C, 3, padding=1, dtype=dtype)
        if "SSM3D" in self.branches:
            self.ssm3d = global_scan if global_scan is not None else Ssm3dParams(rng, shape, planes, d_state, dtype=dtype)


def fft_modulate(F: Tensor, p: MbfemParams) -> Tensor:
    """Pre-GEGLU part of the FFT branch: 1x1, patchwise spectral gain, fold, crop."""
    F = p.fft_pre(F)
    B, H, W, C = F.shape
    dh, dw = p.grid.padding(H, W)
    padded = T.pad_spatial(F, (0, dh), (0, dw), mode="reflect")
    P = spectral_filter(unfold_patches(padded, p.grid), p.fft_gain)
    out = fold_patches(P)
    if dh or dw:
        out = out[:, :H, :W]
    return out


def fft_branch(F: Tensor, p: MbfemParams) -> Tensor:
    return p.fft_proj(geglu(fft_modulate(F, p)))


def conv_branch(F: Tensor, p: MbfemParams) -> Tensor:
    if F.shape[-1] != p.shape[-1]:
        raise ValueError(f"conv_branch: map shape {F.shape} vs module channels {p.shape[-1]}")
    return p.conv2(T.silu(p.conv1(F)))


def branch_sum(F: Tensor, p: MbfemParams, kernel: str = "sequential") -> Tensor | None:
    """Sum of enabled branches in FFT, Conv, SSM3D order; None when none are enabled."""
    total = None
    for name in p.branches:
        if name == "FFT":
            term = fft_branch(F, p)
        elif name == "Conv":
            term = conv_branch(F, p)
        else:
            term = p.ssm3d(F, kernel)
        total = term if total is None else total + term
    return total


def mbfem_forward(F_D: Tensor, F_SIM: Tensor, p: MbfemParams, kernel: str = "sequential") -> Tensor:
    """Upsample the deeper map 2x, fuse with the SIM map, then branches around a scaled residual."""
    F_D, F_SIM = T.as_tensor(F_D), T.as_tensor(F_SIM)
    H, W = F_D.shape[1] * 2, F_D.shape[2] * 2
    up = p.fuse_1x1(T.bilinear_resize(F_D, H, W))
    if up.shape != F_SIM.shape:
        raise ValueError(f"mbfem_forward: upsampled decoder map {up.shape} does not match SIM map {F_SIM.shape}")
    F = p.norm1(up + F_SIM)
    branches = branch_sum(F, p, kernel)
    if branches is None:
        branches = T.Tensor(np.zeros(F.shape, dtype=F.dtype))
    F_prime = p.branch_linear_in(branches)
    return p.branch_linear_out(p.norm2(F_prime + F * p.beta))
