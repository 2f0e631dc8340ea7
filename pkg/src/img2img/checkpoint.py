"""Versioned binary checkpoints.

Byte layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"I2ICKPT\\0"
    8       4     format version (uint32)
    12      8     header length H (uint64)
    20      H     header, UTF-8 JSON with sorted keys
    20+H    ...   tensor payloads, concatenated in header order

The header holds the config snapshot, training step, optimizer scalars, rng
states, metadata and the tensor table: one ``{"name", "dtype", "shape",
"offset", "nbytes"}`` record per tensor, offsets relative to the payload
start. Payloads are raw little-endian ``<f4`` (``<f8`` for 64-bit tensors).
Serialization is canonical, so save -> load -> save reproduces the bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointVersionError

MAGIC = b"I2ICKPT\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    # a list of (name, array) pairs is accepted too; duplicates are rejected on save
    tensors: dict[str, np.ndarray]
    optimizer: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "<f4"
    if a.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported tensor dtype {a.dtype}")


def to_bytes(c: Checkpoint) -> bytes:
    table, payloads, offset = [], [], 0
    seen = set()
    items = c.tensors.items() if isinstance(c.tensors, dict) else c.tensors
    for name, arr in items:
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = {
        "config": c.config,
        "meta": c.meta,
        "optimizer": c.optimizer,
        "rng": c.rng,
        "step": c.step,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, c.version, len(hbytes)) + hbytes + b"".join(payloads)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError("truncated checkpoint: header cut short")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    tensors: dict[str, np.ndarray] = {}
    for rec in header["tensors"]:
        name = rec["name"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r} in checkpoint")
        lo = start + rec["offset"]
        hi = lo + rec["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"truncated checkpoint: payload of {name!r} cut short")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(rec["dtype"]))
        tensors[name] = arr.reshape(rec["shape"]).astype(np.dtype(rec["dtype"]).newbyteorder("="))
    expected = start + sum(rec["nbytes"] for rec in header["tensors"])
    if len(data) != expected:
        raise CheckpointError(f"checkpoint has {len(data) - expected} trailing bytes")
    return Checkpoint(tensors, header["optimizer"], header["rng"], header["step"], header["config"],
                      header["meta"], version)


def save_checkpoint(c: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(to_bytes(c))
        tmp.replace(path)
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror or e}") from e
    try:
        return from_bytes(data)
    except CheckpointError as e:
        raise type(e)(f"{path}: {e}") from e
