"""``CAMW`` weight files.

Layout, little-endian::

    b"CAMW"  u16 version
    u32 len + architecture text (utf-8)
    u32 len + metadata text, key=value lines (utf-8)
    u32 tensor count
    per tensor: u16 len + name, u8 rank, rank x u32 extents, float64 values

Tensor names are model parameters, batch-norm buffers and, optionally, Adam
moments (``adam.m.<name>``, ``adam.v.<name>``) plus the step ``adam.t`` and
``adam.hyper`` (lr, beta1, beta2, eps).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from cajump.nn.model import Model, ModelConfig
from cajump.nn.optim import AdamState

MAGIC = b"CAMW"
VERSION = 1


class CheckpointError(Exception):
    pass


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save(path, model: Model, metadata: dict | None = None, adam: AdamState | None = None) -> None:
    tensors = dict(model.state())
    if adam is not None:
        for name in adam.m:
            tensors[f"adam.m.{name}"] = adam.m[name]
            tensors[f"adam.v.{name}"] = adam.v[name]
        tensors["adam.t"] = np.array([adam.t], dtype=np.float64)
        tensors["adam.hyper"] = np.array([adam.lr, adam.beta1, adam.beta2, adam.eps])
    meta = dict(metadata or {})
    meta.setdefault("in_channels", model.in_channels)
    meta.setdefault("num_classes", model.config.num_classes)
    parts = [MAGIC, struct.pack("<H", VERSION), _text(model.config.to_text())]
    parts.append(_text("".join(f"{k}={v}\n" for k, v in meta.items())))
    parts.append(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        value = np.asarray(value, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(value.tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path):
    """Return ``(model, metadata, adam_state_or_None)``."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a CAMW checkpoint")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arch = r.take(r.unpack("<I")[0]).decode("utf-8")
    meta_text = r.take(r.unpack("<I")[0]).decode("utf-8")
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if "=" in line)
    tensors = {}
    for _ in range(r.unpack("<I")[0]):
        name = r.take(r.unpack("<H")[0]).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    config = ModelConfig.from_text(arch, int(meta.get("num_classes", 10)))
    model = Model(config, in_channels=int(meta.get("in_channels", 1)))
    adam = None
    if "adam.t" in tensors:
        adam = AdamState(t=int(tensors.pop("adam.t")[0]))
        for name in list(tensors):
            if name.startswith("adam.m."):
                adam.m[name[7:]] = tensors.pop(name)
            elif name.startswith("adam.v."):
                adam.v[name[7:]] = tensors.pop(name)
        if "adam.hyper" in tensors:
            adam.lr, adam.beta1, adam.beta2, adam.eps = (float(v) for v in tensors.pop("adam.hyper"))
    model.load_state(tensors)
    if meta.get("precision") == "float32":
        model.astype(np.float32)
    return model, meta, adam
