"""Versioned checkpoint container: a JSON metadata header plus named float64 tensors.

Layout (little endian)::

    b"KPGANCKP" | u32 version | u64 header length | header JSON
    u32 tensor count | per tensor: u16 name length, name, u8 ndim,
                                   ndim x u64 dims, raw float64 data

Tensors are written sorted by name and the header with sorted keys, so
serialize -> deserialize -> serialize reproduces the same bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"KPGANCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    meta: dict[str, Any]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        header = json.dumps({**self.meta, "format_version": FORMAT_VERSION},
                            sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(header)), header,
                 struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name], dtype="<f8")
            raw = name.encode()
            parts.append(struct.pack("<HB", len(raw), arr.ndim))
            parts.append(raw)
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        if blob[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        pos = len(MAGIC)
        version, hlen = struct.unpack_from("<IQ", blob, pos)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
        pos += 12
        meta = json.loads(blob[pos:pos + hlen].decode())
        if meta.pop("format_version", None) != FORMAT_VERSION:
            raise CheckpointError("header version disagrees with container version")
        pos += hlen
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            nlen, ndim = struct.unpack_from("<HB", blob, pos)
            pos += 3
            name = blob[pos:pos + nlen].decode()
            pos += nlen
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
        if pos != len(blob):
            raise CheckpointError(f"{len(blob) - pos} trailing bytes in checkpoint")
        return cls(meta, tensors)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())
