"""Flat binary checkpoint container.

Layout (little-endian)::

    b"SLACCKPT"  u32 version  u64 entry_count
    per entry:   u64 name_len  name (UTF-8)  u64 rank  u64 extents[rank]  f64 payload

Optimizer moments are stored as ordinary entries named ``adam.m/<name>``
and ``adam.v/<name>``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SLACCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            if arr.ndim:
                fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    tmp.replace(path)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def load(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
        (count,) = struct.unpack("<Q", _read_exact(fh, 8))
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", _read_exact(fh, 8))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank)) if rank else ()
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            payload = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8")
            out[name] = payload.reshape(shape).astype(np.float64)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last entry")
    return out
