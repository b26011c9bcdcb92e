"""Siamese encoder, SIM stages, MBFEM decoder and change classifiers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .mbfem import BRANCHES, MbfemParams, mbfem_forward
from .sim import SimParams, sim_forward
from .ssm3d import PLANES, Ssm3dParams, plane_scan
from .tensor import Conv2d, LayerNorm, Linear, Module, Tensor

SIM_MODES = ("SIM", "AbsDiff")
SSM_MODES = ("SSM3D", "SS2D", "SS2D+CA")


class ConfigError(ValueError):
    """A configuration value is invalid; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelConfig:
    image_size: int = 64
    in_channels: int = 3
    encoder_depths: tuple = (2, 2, 2, 2)
    encoder_channels: tuple = (16, 32, 64, 128)
    plane_flags: tuple = PLANES
    branch_flags: tuple = BRANCHES
    sim_mode: str = "SIM"
    ssm_mode: str = "SSM3D"
    state_size: int = 8
    expand: int = 2
    patch_size: int = 8
    gate_softmax: bool = False
    scan_kernel: str = "sequential"
    seed: int = 0

    def __post_init__(self):
        self.encoder_depths = tuple(int(d) for d in self.encoder_depths)
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.plane_flags = _canonical(self.plane_flags, PLANES)
        self.branch_flags = _canonical(self.branch_flags, BRANCHES)
        self.validate()

    def validate(self) -> None:
        if len(self.encoder_depths) != 4 or any(d < 1 for d in self.encoder_depths):
            raise ConfigError("encoder_depths", f"need 4 positive ints, got {list(self.encoder_depths)}")
        chans = self.encoder_channels
        if len(chans) != 4 or any(c < 2 or c % 2 for c in chans):
            raise ConfigError("encoder_channels", f"need 4 even ints >= 2, got {list(chans)}")
        if any(b <= a for a, b in zip(chans, chans[1:])):
            raise ConfigError("encoder_channels", f"must be strictly increasing, got {list(chans)}")
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError("image_size", f"must be a positive multiple of 32, got {self.image_size}")
        if not self.plane_flags or not _subset(self.plane_flags, PLANES):
            raise ConfigError("plane_flags", f"need a non-empty subset of {list(PLANES)}, got {list(self.plane_flags)}")
        if not self.branch_flags or not _subset(self.branch_flags, BRANCHES):
            raise ConfigError("branch_flags", f"need a non-empty subset of {list(BRANCHES)}, got {list(self.branch_flags)}")
        if self.sim_mode not in SIM_MODES:
            raise ConfigError("sim_mode", f"expected one of {list(SIM_MODES)}, got {self.sim_mode!r}")
        if self.ssm_mode not in SSM_MODES:
            raise ConfigError("ssm_mode", f"expected one of {list(SSM_MODES)}, got {self.ssm_mode!r}")
        if self.state_size < 1:
            raise ConfigError("state_size", f"must be >= 1, got {self.state_size}")
        if self.expand < 1:
            raise ConfigError("expand", f"must be >= 1, got {self.expand}")
        if self.patch_size < 2 or self.patch_size & (self.patch_size - 1):
            raise ConfigError("patch_size", f"must be a power of two >= 2, got {self.patch_size}")
        if self.scan_kernel not in ("sequential", "parallel"):
            raise ConfigError("scan_kernel", f"expected 'sequential' or 'parallel', got {self.scan_kernel!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"model.{key}", "unknown key")
        return cls(**data)

    def stage_shapes(self) -> list:
        """(H, W, C) of the four encoder outputs."""
        return [(self.image_size // s, self.image_size // s, c) for s, c in zip((4, 8, 16, 32), self.encoder_channels)]


def _subset(values, allowed) -> bool:
    return all(v in allowed for v in values)


def _canonical(values, allowed) -> tuple:
    values = tuple(values)
    if not _subset(values, allowed):
        return values
    return tuple(v for v in allowed if v in values)


@dataclass
class ChangeMask:
    mask: np.ndarray
    threshold: float = 0.5
    source: str = field(default="D3 head, bilinear upsample, softmax")

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("change mask must be binary")


class ChannelAttentionScan(Module):
    """HW plane scan followed by squeeze-and-excite channel gating."""

    def __init__(self, rng, shape, d_state: int = 8, expand: int = 2, reduction: int = 4, dtype=np.float32):
        C = shape[-1]
        hidden = max(1, C // reduction)
        self.scan = Ssm3dParams(rng, shape, ("HW",), d_state, expand, dtype=dtype)
        self.squeeze = Linear(rng, C, hidden, dtype=dtype)
        self.excite = Linear(rng, hidden, C, dtype=dtype)

    def __call__(self, F: Tensor, kernel: str = "sequential") -> Tensor:
        out = self.scan(F, kernel)
        B, C = out.shape[0], out.shape[-1]
        s = T.sigmoid(self.excite(T.silu(self.squeeze(T.mean(out, axis=(1, 2))))))
        return out * T.reshape(s, (B, 1, 1, C))


def make_global_scan(rng, cfg: ModelConfig, shape, dtype) -> Module:
    if cfg.ssm_mode == "SSM3D":
        return Ssm3dParams(rng, shape, cfg.plane_flags, cfg.state_size, cfg.expand, dtype=dtype)
    if cfg.ssm_mode == "SS2D":
        return Ssm3dParams(rng, shape, ("HW",), cfg.state_size, cfg.expand, dtype=dtype)
    return ChannelAttentionScan(rng, shape, cfg.state_size, cfg.expand, dtype=dtype)


class VssBlock(Module):
    """norm -> HW plane scan -> residual -> norm -> SiLU MLP -> residual."""

    def __init__(self, rng, shape, d_state: int, expand: int, dtype=np.float32):
        C = shape[-1]
        self.norm1 = LayerNorm(C, dtype=dtype)
        self.scan = Ssm3dParams(rng, shape, ("HW",), d_state, expand, dtype=dtype)
        self.norm2 = LayerNorm(C, dtype=dtype)
        self.mlp_in = Linear(rng, C, 2 * C, dtype=dtype)
        self.mlp_out = Linear(rng, 2 * C, C, dtype=dtype)

    def __call__(self, x: Tensor, kernel: str) -> Tensor:
        x = x + plane_scan(self.norm1(x), self.scan.vme["HW"], "HW", kernel)
        return x + self.mlp_out(T.silu(self.mlp_in(self.norm2(x))))


class EncoderStage(Module):
    def __init__(self, rng, c_in: int, shape, depth: int, first: bool, d_state: int, expand: int, dtype=np.float32):
        C = shape[-1]
        k = 4 if first else 2
        self.down = Conv2d(rng, c_in, C, k, stride=k, dtype=dtype)
        self.down_norm = LayerNorm(C, dtype=dtype)
        self.blocks = [VssBlock(rng, shape, d_state, expand, dtype) for _ in range(depth)]

    def __call__(self, x: Tensor, kernel: str) -> Tensor:
        x = self.down_norm(self.down(x))
        for block in self.blocks:
            x = block(x, kernel)
        return x


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig, dtype=np.float32):
        shapes = cfg.stage_shapes()
        c_in = cfg.in_channels
        self.stages = []
        for i, (shape, depth) in enumerate(zip(shapes, cfg.encoder_depths)):
            self.stages.append(EncoderStage(rng, c_in, shape, depth, i == 0, cfg.state_size, cfg.expand, dtype))
            c_in = shape[-1]


def encoder_forward(image, encoder: Encoder, kernel: str = "sequential") -> list:
    """Four feature maps at 1/4, 1/8, 1/16, 1/32 of the input resolution."""
    x = T.as_tensor(image)
    squeeze = x.ndim == 3
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    H, W = x.shape[1:3]
    if H % 32 or W % 32:
        raise ValueError(f"encoder_forward: image shape {x.shape} must have H and W divisible by 32")
    feats = []
    for stage in encoder.stages:
        x = stage(x, kernel)
        feats.append(T.reshape(x, x.shape[1:]) if squeeze else x)
    return feats


class ChangeDetector(Module):
    """Full model. Parameter names (attribute order) define the checkpoint layout."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(dtype)
        shapes = cfg.stage_shapes()
        self.encoder = Encoder(rng, cfg, dtype)
        if cfg.sim_mode == "SIM":
            self.sims = [SimParams(rng, s, make_global_scan(rng, cfg, s, dtype), gate_softmax=cfg.gate_softmax, dtype=dtype)
                         for s in shapes]
        else:
            self.sims = []
        # decoder j fuses the deeper map into SIM stage 3 - j (0-based): 1/16, 1/8, 1/4
        self.decoders = []
        for j in range(3):
            shape = shapes[2 - j]
            c_prev = shapes[3 - j][-1]
            self.decoders.append(MbfemParams(rng, c_prev, shape, cfg.branch_flags, make_global_scan(rng, cfg, shape, dtype)
                                             if "SSM3D" in cfg.branch_flags else None, cfg.plane_flags, cfg.state_size,
                                             cfg.patch_size, dtype))
        self.heads = [Linear(rng, shapes[2 - j][-1], 2, dtype=dtype) for j in range(3)]


def difference_features(f1: list, f2: list, model: ChangeDetector, kernel: str) -> list:
    if model.config.sim_mode == "SIM":
        return [sim_forward(a, b, p, kernel) for a, b, p in zip(f1, f2, model.sims)]
    return [T.tabs(a - b) for a, b in zip(f1, f2)]


def model_forward(I1, I2, model: ChangeDetector, kernel: str | None = None) -> tuple:
    """Logits of the three supervised decoder heads, coarse to fine."""
    I1, I2 = T.as_tensor(I1), T.as_tensor(I2)
    if I1.shape != I2.shape:
        raise ValueError(f"model_forward: image shapes differ, {I1.shape} vs {I2.shape}")
    size = model.config.image_size
    if I1.shape[-3:-1] != (size, size):
        raise ValueError(f"model_forward: image shape {I1.shape} does not match configured size {size}x{size}")
    kernel = kernel or model.config.scan_kernel
    f1 = encoder_forward(I1, model.encoder, kernel)
    f2 = encoder_forward(I2, model.encoder, kernel)
    sim = difference_features(f1, f2, model, kernel)
    d = sim[3]
    logits = []
    for j, (dec, head) in enumerate(zip(model.decoders, model.heads)):
        d = mbfem_forward(d, sim[2 - j], dec, kernel)
        logits.append(head(d))
    return tuple(logits)


def change_probability(logits: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upsample 2-class logits to (out_h, out_w) and return the change-class probability."""
    up = T.bilinear_resize(logits, out_h, out_w)
    probs = T.softmax_channels(up)
    return probs[..., 1]


def predict(I1, I2, model: ChangeDetector, threshold: float = 0.5) -> ChangeMask:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    logits = model_forward(I1, I2, model)[-1]
    H, W = T.as_tensor(I1).shape[-3:-1]
    return mask_from_logits(logits.data, H, W, threshold)


def mask_from_logits(logits: np.ndarray, H: int, W: int, threshold: float = 0.5) -> ChangeMask:
    prob = change_probability(T.Tensor(logits), H, W).data
    return ChangeMask((prob >= threshold).astype(np.uint8), threshold)


def parameter_count(cfg: ModelConfig) -> int:
    return ChangeDetector(cfg).num_parameters()
