"""Portable binary checkpoints.

Layout (all integers little-endian)::

    b"GZTK"                magic
    u32                    format version
    u32                    metadata length in bytes
    bytes                  metadata, UTF-8 JSON (config snapshot, step, ...)
    u32                    number of tensor entries
    entries                u16 name length, name (UTF-8), u8 dtype code,
                           u8 ndim, u32 * ndim dims, u64 offset, u64 nbytes
    payload                concatenated little-endian float32 tensors;
                           offsets are relative to the payload start

Only dtype code 1 (float32) is defined.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError
from ..numerics import LrSchedule, Parameter
from .config import GazeNetConfig
from .model import GazeNet

MAGIC = b"GZTK"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4")}
_CODES = {np.dtype("<f4"): 1}
PIXEL_NORMALIZATION = "x / 127.5 - 1"


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.format_version != other.format_version or self.meta != other.meta:
            return False
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.tensors.values(), other.tensors.values()))

    @property
    def step(self):
        return int(self.meta.get("step", 0))

    @property
    def config(self):
        return GazeNetConfig.from_dict(self.meta["config"])


def to_bytes(ckpt):
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    head = [MAGIC, struct.pack("<II", ckpt.format_version, len(meta)), meta,
            struct.pack("<I", len(ckpt.tensors))]
    payload = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = arr.tobytes()
        nb = name.encode("utf-8")
        head.append(struct.pack("<H", len(nb)) + nb)
        head.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.append(struct.pack("<QQ", offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    return b"".join(head + payload)


def from_bytes(buf):
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("bad magic; not a GZTK checkpoint")
    version, meta_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint format version {version}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointFormatError(f"corrupt checkpoint metadata: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointFormatError(f"tensor {name!r}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        off, nbytes = struct.unpack("<QQ", take(16))
        table.append((name, _DTYPES[code], shape, off, nbytes))
    base = pos
    tensors = OrderedDict()
    for name, dt, shape, off, nbytes in table:
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointFormatError(f"tensor {name!r}: byte count does not match shape")
        if base + off + nbytes > len(view):
            raise CheckpointFormatError(f"tensor {name!r}: payload out of range")
        arr = np.frombuffer(view[base + off:base + off + nbytes], dtype=dt).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return Checkpoint(tensors=tensors, meta=meta, format_version=version)


def save(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))


def load(path):
    return from_bytes(Path(path).read_bytes())


def from_network(net, step=0, schedule=None, extra=None):
    """Snapshot ``net`` (with Adam state) into a :class:`Checkpoint`."""
    tensors = OrderedDict()
    for name, p in net.params.items():
        tensors[f"param/{name}"] = p.value.astype(np.float32)
    for name, b in net.buffers.items():
        tensors[f"buffer/{name}"] = b.astype(np.float32)
    for name, p in net.params.items():
        tensors[f"adam_m/{name}"] = p.adam_m.astype(np.float32)
        tensors[f"adam_v/{name}"] = p.adam_v.astype(np.float32)
    schedule = schedule or net.config.schedule
    meta = {
        "config": net.config.to_dict(),
        "step": int(step),
        "schedule_state": schedule.state(),
        "pixel_normalization": PIXEL_NORMALIZATION,
    }
    if extra:
        meta.update(extra)
    return Checkpoint(tensors=tensors, meta=meta)


def to_network(ckpt):
    """Rebuild a float32 :class:`GazeNet` (parameters, buffers, Adam moments)."""
    net = GazeNet(ckpt.config)
    for name in list(net.params):
        try:
            value = ckpt.tensors[f"param/{name}"]
        except KeyError:
            raise CheckpointFormatError(f"checkpoint lacks parameter {name!r}") from None
        if value.shape != net.params[name].value.shape:
            raise CheckpointFormatError(f"parameter {name!r} has shape {value.shape}")
        m = ckpt.tensors.get(f"adam_m/{name}")
        v = ckpt.tensors.get(f"adam_v/{name}")
        net.params[name] = Parameter(
            value.copy(),
            adam_m=np.zeros_like(value) if m is None else m.copy(),
            adam_v=np.zeros_like(value) if v is None else v.copy(),
        )
    for name in list(net.buffers):
        try:
            net.buffers[name] = ckpt.tensors[f"buffer/{name}"].copy()
        except KeyError:
            raise CheckpointFormatError(f"checkpoint lacks buffer {name!r}") from None
    return net


def restore_schedule(ckpt):
    cfg = ckpt.config
    state = ckpt.meta.get("schedule_state", {})
    return LrSchedule(**cfg.schedule.settings(), **state)
