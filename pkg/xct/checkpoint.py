# xct/checkpoint.py

"""
Checkpoint file layout (all integers little-endian)::

    b"XCTC"  u32 version  u32 count
    count × tensor            model parameters
    u32 count
    count × tensor            optimizer moments
    u32 length  JSON          config, counters, RNG and optimizer scalars

    tensor := u16 name_len, name (UTF-8), u8 rank, rank × u32 dims, f32 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from xct.errors import FormatError

_MAGIC = b"XCTC"
_VERSION = 1
_STORAGE = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return self.meta.get("epoch", 0)

    @property
    def stage(self) -> str:
        return self.meta.get("stage", "init")

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {name: value for name, value in self.tensors.items() if name.startswith(prefix)}

    def to_bytes(self) -> bytes:
        parts = [_MAGIC, struct.pack("<2I", _VERSION, len(self.tensors))]
        parts += [_pack_tensor(name, value) for name, value in self.tensors.items()]
        parts.append(struct.pack("<I", len(self.optimizer)))
        parts += [_pack_tensor(name, value) for name, value in self.optimizer.items()]

        blob = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts += [struct.pack("<I", len(blob)), blob]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, path: str | Path = "<bytes>") -> Checkpoint:
        reader = _Reader(data, path)

        if reader.take(4, "magic") != _MAGIC:
            raise FormatError(path, "magic", "bad magic")
        (version,) = reader.unpack("<I", "version")
        if version != _VERSION:
            raise FormatError(path, "version", f"unsupported version {version}")

        (count,) = reader.unpack("<I", "tensor count")
        tensors = dict(reader.tensor() for _ in range(count))
        (count,) = reader.unpack("<I", "optimizer count")
        optimizer = dict(reader.tensor() for _ in range(count))

        (length,) = reader.unpack("<I", "config length")
        blob = reader.take(length, "config")
        if reader.offset != len(data):
            raise FormatError(path, "config", "trailing bytes after config")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(path, "config", f"unreadable config blob: {e}") from e

        return cls(tensors, optimizer, meta)


def _pack_tensor(name: str, value: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    value = np.asarray(value)
    header = struct.pack(f"<H{len(encoded)}sB{value.ndim}I", len(encoded), encoded, value.ndim, *value.shape)
    return header + value.astype(_STORAGE).tobytes()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(self.path, what, "truncated")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self) -> tuple[str, np.ndarray]:
        (length,) = self.unpack("<H", "tensor name length")
        try:
            name = self.take(length, "tensor name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(self.path, "tensor name", "name is not UTF-8") from e

        (rank,) = self.unpack("<B", f"{name} rank")
        shape = self.unpack(f"<{rank}I", f"{name} dims")
        size = int(np.prod(shape)) * _STORAGE.itemsize
        payload = self.take(size, name)
        return name, np.frombuffer(payload, dtype=_STORAGE).reshape(shape).astype(np.float32)


def write_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint.to_bytes())
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    return Checkpoint.from_bytes(path.read_bytes(), path)


def stored(values: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Copies at file resolution, so an in-memory checkpoint equals its reloaded self."""
    return {name: np.asarray(value).astype(np.float32) for name, value in values.items()}
