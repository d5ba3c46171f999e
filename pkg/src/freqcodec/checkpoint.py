"""Checkpoint file I/O.

Layout (all integers little-endian)::

    b"FOTW"  u16 version  u32 record count
    per record: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], payload

Payloads are f32, except records whose name starts with ``TABLE_PREFIX``,
which hold u16 integers (entropy-coder frequency tables).
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FOTW"
VERSION = 1
TABLE_PREFIX = "tables/"


class CheckpointError(ValueError):
    pass


def _payload_dtype(name: str):
    return np.dtype("<u2") if name.startswith(TABLE_PREFIX) else np.dtype("<f4")


def dumps(records: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(records))]
    for name, value in records.items():
        encoded = name.encode("utf-8")
        dtype = _payload_dtype(name)
        arr = np.asarray(value)
        if dtype.kind == "u" and (arr.min(initial=0) < 0 or arr.max(initial=0) > 0xFFFF):
            raise CheckpointError(f"{name}: values do not fit in u16")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dtype = _payload_dtype(name)
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
            out[name] = arr.reshape(dims).astype(np.float32 if dtype.kind == "f" else np.int64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return out


def atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, records: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, dumps(records))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
