"""Little-endian binary checkpoints for named float32 arrays.

Layout::

    b"PICN" | version u32 | count u32
    per array: name_len u32 | utf-8 name | rank u32 | extents u32[rank] | f32[prod(extents)]
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"PICN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]):
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated at byte {off} (wanted {n} more)")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return out
