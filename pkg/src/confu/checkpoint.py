"""Binary named-tensor container.

Layout (all integers little-endian)::

    magic      8 bytes  b"CONFUCKP"
    version    u32
    meta_len   u64, then meta_len bytes of UTF-8 JSON (stage, step, config echo)
    records    until EOF, sorted by name:
               u32 name_len, name bytes (UTF-8), u32 rank, rank x u64 dims,
               prod(dims) x float64 payload
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from .errors import FormatError
from .nn import DTYPE

MAGIC = b"CONFUCKP"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict = field(default_factory=dict)
    stage: str = ""
    step: int = 0
    version: int = VERSION

    def meta(self) -> dict:
        return {"config": self.config, "stage": self.stage, "step": self.step}

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    meta = json.dumps(ckpt.meta(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    for name in sorted(ckpt.tensors):
        value = ckpt.tensors[name].detach().to(DTYPE).contiguous()
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", value.dim()))
        for dim in value.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(value.numpy().astype("<f8").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> Checkpoint:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    pos = 8

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    tensors: dict[str, torch.Tensor] = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank)) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(bytes(take(8 * count)), dtype="<f8").reshape(dims)
        tensors[name] = torch.from_numpy(payload.astype(np.float64))
    return Checkpoint(
        tensors=tensors,
        config=meta.get("config", {}),
        stage=meta.get("stage", ""),
        step=int(meta.get("step", 0)),
        version=version,
    )


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())


def from_stores(stores: Mapping[str, torch.Tensor], **kwargs) -> Checkpoint:
    return Checkpoint(tensors={k: v.detach().clone() for k, v in stores.items()}, **kwargs)
