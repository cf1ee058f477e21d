"""Binary tensor container.

Layout (little-endian): magic ``b"SUMA"``, u32 format version, then records
until EOF. Each record is u32 name length, utf-8 name, u32 rank, rank x u64
dims, float64 payload in C order.
"""
from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SUMA"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f8", order="C")  # ascontiguousarray would turn 0-d into 1-d
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    n = len(buf)
    try:
        while off < n:
            (ln,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = buf[off:off + 8 * count]
            if len(payload) != 8 * count:
                raise CheckpointError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
            off += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated record at byte {off}") from exc
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> str:
    """Atomically write `tensors`; returns the sha256 of the file contents."""
    data = dumps(tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def fingerprint(tensors: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(dict(sorted(tensors.items())))).hexdigest()[:16]
