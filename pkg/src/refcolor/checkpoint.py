"""Binary checkpoint container: header, JSON snapshot, named array blobs.

Layout (little endian)::

    b"RCKP" | u32 version | u32 json length | JSON | u32 blob count
    per blob: u16 name length | name | u8 dtype code | u8 ndim | ndim × u32 | u64 byte count | bytes
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .engine import Adam, Module

MAGIC = b"RCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    """Unreadable, truncated, version-mismatched or incompatible checkpoint."""


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    blobs: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    # loss rows of the run that produced this checkpoint; not serialised
    history: list = field(default_factory=list, compare=False, repr=False)

    def has_prefix(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.blobs)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v) for k, v in self.blobs.items() if k.startswith(prefix))


def _encode(name: str, arr: np.ndarray) -> bytes:
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _CODES:
        raise CheckpointError(f"blob {name}: unsupported dtype {arr.dtype}")
    raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
    key = name.encode()
    return (struct.pack("<H", len(key)) + key + struct.pack("<BB", _CODES[dt], arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<Q", len(raw)) + raw)


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"config": ckpt.config, "meta": ckpt.meta}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(ckpt.blobs))]
    parts += [_encode(k, v) for k, v in ckpt.blobs.items()]
    return b"".join(parts)


def save_checkpoint(path: Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.off = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header") from exc
    (count,) = r.unpack("<I")
    blobs = OrderedDict()
    for _ in range(count):
        (klen,) = r.unpack("<H")
        name = r.take(klen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: blob {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        (nbytes,) = r.unpack("<Q")
        dt = _DTYPES[code]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise CheckpointError(f"{source}: blob {name} size disagrees with its shape")
        blobs[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.off != len(raw):
        raise CheckpointError(f"{source}: trailing bytes after the last blob")
    return Checkpoint(header.get("config", {}), header.get("meta", {}), blobs)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from exc
    return from_bytes(raw, str(path))


# -- module and optimiser state ---------------------------------------------------

def module_blobs(module: Module, prefix: str) -> "OrderedDict[str, np.ndarray]":
    """Parameter arrays plus power-iteration vectors (suffix ``#u``)."""
    out = OrderedDict()
    for name, p in module.named_parameters():
        out[f"{prefix}{name}"] = p.data.copy()
        if p.spectral_u is not None:
            out[f"{prefix}{name}#u"] = np.asarray(p.spectral_u).copy()
    return out


def load_module(module: Module, blobs: Dict[str, np.ndarray], prefix: str) -> None:
    """Copy blobs into ``module`` in place; every parameter must be present with its exact shape."""
    for name, p in module.named_parameters():
        key = f"{prefix}{name}"
        if key not in blobs:
            raise CheckpointError(f"checkpoint lacks parameter {key}")
        arr = blobs[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {key}: checkpoint {arr.shape}, model {p.data.shape}")
    for name, p in module.named_parameters():
        key = f"{prefix}{name}"
        p.data = np.array(blobs[key], dtype=p.data.dtype)
        u = blobs.get(f"{key}#u")
        if u is not None:
            p.spectral_u = np.array(u, dtype=p.data.dtype)


def optimizer_blobs(opt: Adam, prefix: str) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    out[f"{prefix}t"] = np.array([opt.t], dtype=np.int64)
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"{prefix}m.{i}"] = m.copy()
        out[f"{prefix}v.{i}"] = v.copy()
    return out


def load_optimizer(opt: Adam, blobs: Dict[str, np.ndarray], prefix: str) -> None:
    if f"{prefix}t" not in blobs:
        raise CheckpointError(f"checkpoint lacks optimiser state {prefix}")
    n = len(opt.params)
    try:
        m = [blobs[f"{prefix}m.{i}"] for i in range(n)]
        v = [blobs[f"{prefix}v.{i}"] for i in range(n)]
    except KeyError as exc:
        raise CheckpointError(f"incomplete optimiser state {prefix}: missing {exc}") from exc
    for i, (a, p) in enumerate(zip(m, opt.params)):
        if a.shape != p.data.shape:
            raise CheckpointError(f"optimiser state {prefix}m.{i} shape mismatch")
    opt.load_state(int(blobs[f"{prefix}t"][0]), m, v)
