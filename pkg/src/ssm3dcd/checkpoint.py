"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic  b"SSM3DCKP"
    u32    format version
    u32    config length, then the ModelConfig as UTF-8 JSON text
    u32    parameter count
    per parameter:
        u16 name length, name (UTF-8)
        u8  rank, rank x u32 dims
        float32 values, little-endian, C order
    32 bytes sha256 over everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

from .network import ChangeDetector, ModelConfig

MAGIC = b"SSM3DCKP"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint; ``parameter`` names the first offender if any."""

    def __init__(self, msg: str, parameter: str | None = None):
        super().__init__(msg)
        self.parameter = parameter


def dumps(model: ChangeDetector) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype=_F32).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save(model: ChangeDetector, path: str) -> None:
    with open(path, "wb") as f:
        f.write(dumps(model))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes):
    """Parse checkpoint bytes into ``(ModelConfig, [(name, array)])``."""
    if len(data) < len(MAGIC) + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch; file is corrupt")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n_cfg,) = r.unpack("<I")
    cfg = ModelConfig.from_dict(json.loads(r.take(n_cfg).decode()))
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(size * 4), dtype=_F32).reshape(shape)
        entries.append((name, values))
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after the last parameter")
    return cfg, entries


def load_into(model: ChangeDetector, entries) -> ChangeDetector:
    """Copy checkpoint values into ``model`` after checking every name and shape."""
    params = list(model.named_parameters())
    for (name, p), (ck_name, values) in zip(params, entries):
        if name != ck_name or p.data.shape != values.shape:
            raise CheckpointError(f"parameter {name} {p.data.shape} does not match checkpoint entry "
                                  f"{ck_name} {values.shape}", parameter=name)
    if len(params) != len(entries):
        first = params[len(entries)][0] if len(params) > len(entries) else entries[len(params)][0]
        raise CheckpointError(f"parameter count {len(params)} does not match checkpoint count {len(entries)}; "
                              f"first unmatched parameter {first}", parameter=first)
    for (_, p), (_, values) in zip(params, entries):
        p.assign(values.astype(p.data.dtype))
    return model


def load(path: str, dtype=np.float32, config: ModelConfig | None = None) -> ChangeDetector:
    """Rebuild a model from ``path``; with ``config`` the weights must fit that config instead."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    cfg, entries = loads(data)
    return load_into(ChangeDetector(config or cfg, dtype), entries)
