"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"SCKP"  u16 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dim, float64 data }

Scalars and metadata are stored as ordinary named tensors.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise CheckpointError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(data, "<f8", size, pos).astype(np.float64).reshape(dims)
            pos += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
