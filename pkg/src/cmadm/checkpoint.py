"""CMADM1 checkpoint format.

Layout (all integers little-endian)::

    b"CMADM1\\n"
    u32 entry_count
    per entry: u32 name_len, name (utf-8), u32 rank, rank x u64 extents
    per entry, in manifest order: row-major float64 values
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CorruptArtifactError

MAGIC = b"CMADM1\n"


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    head = [MAGIC, struct.pack("<I", len(tensors))]
    body = []
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        head.append(struct.pack("<I", len(raw)) + raw)
        head.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    return b"".join(head + body)


def loads(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise CorruptArtifactError("checkpoint: bad magic string")
    pos = len(MAGIC)

    def read(fmt: str, what: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CorruptArtifactError(f"checkpoint: truncated while reading {what}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (count,) = read("<I", "entry count")
    manifest = []
    for i in range(count):
        (n,) = read("<I", f"name length of entry {i}")
        if pos + n > len(data):
            raise CorruptArtifactError(f"checkpoint: truncated name of entry {i}")
        try:
            name = data[pos : pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptArtifactError(f"checkpoint: undecodable name of entry {i}") from exc
        pos += n
        (rank,) = read("<I", f"rank of {name!r}")
        extents = read(f"<{rank}Q", f"extents of {name!r}") if rank else ()
        manifest.append((name, tuple(int(e) for e in extents)))
    out = {}
    for name, shape in manifest:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(data):
            raise CorruptArtifactError(f"checkpoint: values of {name!r} truncated")
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
        if not np.all(np.isfinite(arr)):
            raise CorruptArtifactError(f"checkpoint: non-finite values in {name!r}")
        out[name] = arr
    if pos != len(data):
        raise CorruptArtifactError(f"checkpoint: {len(data) - pos} trailing bytes")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
