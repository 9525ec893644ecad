"""ADGT: a tiny binary container for one float32 tensor.

Layout (all little-endian)::

    b"ADGT" | u8 version=1 | u8 dtype=0 (f32) | u8 rank | rank x u32 extents | f32 payload

The payload is row-major. Reading back a written file reproduces the array
bit for bit.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADGT"
VERSION = 1
DTYPE_F32 = 0
_HEAD = struct.Struct("<4sBBB")


class AdgtFormatError(ValueError):
    """Malformed or truncated ADGT data."""


def encode(array) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise AdgtFormatError(f"rank {arr.ndim} exceeds the u8 rank field")
    header = _HEAD.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + extents + arr.tobytes(order="C")


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise AdgtFormatError(
            f"{source}: truncated header at offset {len(buf)} (need {_HEAD.size} bytes)"
        )
    magic, version, dtype, rank = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise AdgtFormatError(f"{source}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != VERSION:
        raise AdgtFormatError(f"{source}: unsupported version {version} at offset 4")
    if dtype != DTYPE_F32:
        raise AdgtFormatError(f"{source}: unsupported dtype code {dtype} at offset 5")
    off = _HEAD.size
    need = off + 4 * rank
    if len(buf) < need:
        raise AdgtFormatError(
            f"{source}: truncated extents at offset {len(buf)} (need {need} bytes)"
        )
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off = need
    count = int(np.prod(shape, dtype=np.int64))
    end = off + 4 * count
    if len(buf) < end:
        raise AdgtFormatError(
            f"{source}: truncated payload at offset {len(buf)} (expected {end} bytes for shape {shape})"
        )
    if len(buf) > end:
        raise AdgtFormatError(f"{source}: {len(buf) - end} trailing bytes after offset {end}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return arr.reshape(shape).astype(np.float32)


def save(path: str | os.PathLike, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"ADGT file not found: {path}") from None
    return decode(buf, source=str(path))
