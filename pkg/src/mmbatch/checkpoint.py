"""Versioned binary container for named float32 tensors.

Layout (little-endian)::

    b"MMCK" | version u16 | count u32 |
    count x ( name_len u16 | name utf-8 | rank u8 | dims u32[rank] | f32 data )
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"MMCK"
VERSION = 1


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise CheckpointError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensors(tensors))


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())
