"""IDLN model files shared by the detector, segmenter and embedder.

Layout, all integers little-endian::

    b"IDLN"  u32 version
    u32 len + utf-8 model kind        ("detector" | "segmenter" | "embedder")
    u32 len + utf-8 JSON config       (sorted keys, enough to rebuild the net)
    u32 entry count
    per entry: u16 len + utf-8 name, u8 role, u8 ndim, ndim x u32 dims
    raw float32 data of every entry, in manifest order

Roles: 0 parameter, 1 buffer (batch-norm running statistics), 2 the
training-set channel means. Writing is deterministic, so two identical
training runs produce byte-identical files.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, fields
from pathlib import Path
from typing import Union

import numpy as np

from . import nn

MAGIC = b"IDLN"
VERSION = 1
ROLE_PARAM, ROLE_BUFFER, ROLE_MEANS = 0, 1, 2
MEANS_NAME = "channel_means"


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def model_config(model: nn.Module) -> tuple[str, dict]:
    from .detect import Detector
    from .embed import Embedder
    from .segment import SegNet
    if isinstance(model, Detector):
        return "detector", asdict(model.cfg)
    if isinstance(model, Embedder):
        return "embedder", asdict(model.cfg)
    if isinstance(model, SegNet):
        return "segmenter", {"width": model.width, "in_channels": model.in_channels}
    raise TypeError(f"no serializer for {type(model).__name__}")


def build_from_config(kind: str, cfg: dict) -> nn.Module:
    from .detect import DetectorConfig, build_detector
    from .embed import EmbedderConfig, build_embedder
    from .segment import build_segnet
    cfg = {k: _tuplify(v) for k, v in cfg.items()}
    if kind == "detector":
        return build_detector(_dataclass_from(DetectorConfig, cfg))
    if kind == "embedder":
        return build_embedder(_dataclass_from(EmbedderConfig, cfg))
    if kind == "segmenter":
        return build_segnet(cfg["width"], cfg["in_channels"])
    raise ValueError(f"unknown model kind {kind!r}")


def _dataclass_from(cls, cfg: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(cfg) - names
    if unknown:
        raise ValueError(f"{cls.__name__}: unknown config keys {sorted(unknown)}")
    return cls(**cfg)


def _pack_str(s: str, width: str = "<I") -> bytes:
    b = s.encode("utf-8")
    return struct.pack(width, len(b)) + b


def dumps(model: nn.Module, channel_means) -> bytes:
    kind, cfg = model_config(model)
    entries = [(n, ROLE_PARAM, np.asarray(p.data)) for n, p in model.named_parameters()]
    entries += [(n, ROLE_BUFFER, np.asarray(b)) for n, b in model.named_buffers()]
    entries.append((MEANS_NAME, ROLE_MEANS, np.asarray(channel_means, np.float32).reshape(-1)))
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    out.write(_pack_str(kind))
    out.write(_pack_str(json.dumps(cfg, sort_keys=True)))
    out.write(struct.pack("<I", len(entries)))
    for name, role, arr in entries:
        out.write(_pack_str(name, "<H"))
        out.write(struct.pack("<BB", role, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, _, arr in entries:
        out.write(np.ascontiguousarray(arr, "<f4").tobytes())
    return out.getvalue()


def save_model(path: Union[str, Path], model: nn.Module, channel_means) -> Path:
    path = Path(path)
    path.write_bytes(dumps(model, channel_means))
    return path


class _Reader:
    def __init__(self, data: bytes, origin: str):
        self.data, self.pos, self.origin = data, 0, origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.origin}: truncated model file")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str = "<I") -> str:
        n, = self.unpack(width)
        return self.take(n).decode("utf-8")


def loads(data: bytes, origin: str = "<bytes>") -> tuple[nn.Module, np.ndarray, str]:
    r = _Reader(data, origin)
    if r.take(4) != MAGIC:
        raise ValueError(f"{origin}: not an IDLN model file")
    version, = r.unpack("<I")
    if version != VERSION:
        raise ValueError(f"{origin}: unsupported IDLN version {version}")
    kind = r.string()
    cfg = json.loads(r.string())
    count, = r.unpack("<I")
    manifest = []
    for _ in range(count):
        name = r.string("<H")
        role, ndim = r.unpack("<BB")
        manifest.append((name, role, r.unpack(f"<{ndim}I") if ndim else ()))
    state, means = {}, None
    for name, role, shape in manifest:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), "<f4").reshape(shape).astype(np.float32)
        if role == ROLE_MEANS:
            means = arr
        else:
            state[name] = arr
    if r.pos != len(data):
        raise ValueError(f"{origin}: {len(data) - r.pos} trailing bytes")
    if means is None:
        raise ValueError(f"{origin}: no channel means stored")
    model = build_from_config(kind, cfg)
    expected = {n for n, _ in model.named_parameters()}
    missing = expected - set(state)
    if missing:
        raise ValueError(f"{origin}: missing parameters {sorted(missing)[:3]}")
    model.load_state_dict(state)
    model.eval()
    return model, means, kind


def load_model(path: Union[str, Path], expect: str | None = None) -> tuple[nn.Module, np.ndarray]:
    path = Path(path)
    model, means, kind = loads(path.read_bytes(), str(path))
    if expect is not None and kind != expect:
        raise ValueError(f"{path}: holds a {kind}, expected a {expect}")
    return model, means

