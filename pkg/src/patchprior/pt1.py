"""PT1 tensor files.

Layout: magic ``b"PT1\\n"``, little-endian u32 rank, rank x u32 extents,
then the raw little-endian float32 payload.  A file may hold several tensors
back to back; :func:`read_all` returns them in order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

MAGIC = b"PT1\n"


class CorruptFileError(ValueError):
    """A PT1 stream is truncated or does not start with the magic bytes."""


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if not np.all(np.isfinite(a)):
        raise ValueError("PT1 tensors must be finite")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptFileError(f"truncated PT1 stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_one(fh: BinaryIO) -> np.ndarray | None:
    """Read the next tensor, or return ``None`` at a clean end of stream."""
    magic = fh.read(len(MAGIC))
    if not magic:
        return None
    if magic != MAGIC:
        raise CorruptFileError(f"bad PT1 magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write(path: str | os.PathLike, arrays: np.ndarray | Iterable[np.ndarray]) -> None:
    if isinstance(arrays, np.ndarray):
        arrays = [arrays]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for a in arrays:
            fh.write(encode(a))


def read_all(path: str | os.PathLike) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (a := read_one(fh)) is not None:
            out.append(a)
    return out


def read(path: str | os.PathLike) -> np.ndarray:
    arrays = read_all(path)
    if len(arrays) != 1:
        raise CorruptFileError(f"expected a single tensor in {path}, found {len(arrays)}")
    return arrays[0]
