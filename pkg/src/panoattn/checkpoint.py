"""EGTN checkpoint format.

Layout (little endian): magic ``b"EGTN"``, u32 version, u32 tensor count,
then per tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 extents,
raw f64 payload in row-major order.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"EGTN"
VERSION = 1


class CheckpointError(OSError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    def need(off, n):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off} (need {n} more bytes)")

    need(0, 12)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at byte 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at byte 4")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(off, 4)
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen)
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        need(off, 4)
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 8 * rank)
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        need(off, nbytes)
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
