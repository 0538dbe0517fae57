"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"MOSBCKPT"
    version    u32
    config     u32 length + UTF-8 JSON
    meta       u32 length + UTF-8 JSON (step, rng state, optimizer, metrics tail)
    n_records  u32
    records    name_len u32, name UTF-8, dtype tag u8, rank u32, dims u64 * rank, raw data

JSON blocks are written with sorted keys and fixed separators, so a
load/save cycle reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointFormatError

MAGIC = b"MOSBCKPT"
FORMAT_VERSION = 1

_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_OF = {np.dtype(v).newbyteorder("="): k for k, v in _TAGS.items()}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    step: int = 0
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    for block in (canonical_json(ckpt.config), canonical_json({**ckpt.meta, "step": int(ckpt.step)})):
        raw = block.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    parts.append(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        tag = _TAG_OF.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise CheckpointFormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<BI", tag, arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    blocks = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        try:
            blocks.append(json.loads(r.take(n).decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"corrupt JSON block: {e}") from e
    config, meta = blocks
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        tag, rank = r.unpack("<BI")
        if tag not in _TAGS:
            raise CheckpointFormatError(f"array {name!r} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}Q")
        dt = _TAGS[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after the last record")
    step = int(meta.pop("step", 0))
    return Checkpoint(config, arrays, step, meta, version)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
