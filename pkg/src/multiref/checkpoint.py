"""Binary tensor container.

Layout: the 4-byte magic ``EZRF``, a little-endian u32 format version, then
records until end of file.  Each record is::

    u32 name length | name (utf-8) | u8 dtype tag | u32 rank | u64 extent * rank | payload

Payload is raw little-endian float32 (tag 0) or float64 (tag 1).
"""

from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"EZRF"
VERSION = 1
_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(IOError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, array in tensors.items():
        array = np.asarray(array)
        if array.dtype.kind != "f" or array.dtype.itemsize not in (4, 8):
            raise CheckpointError(f"{name}: only float32/float64 payloads, got {array.dtype}")
        array = array.astype(array.dtype.newbyteorder("<"), copy=False)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BI", _TAGS[array.dtype], array.ndim))
        buf.write(struct.pack(f"<{array.ndim}Q", *array.shape))
        buf.write(np.ascontiguousarray(array).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a tensor checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            tag, rank = struct.unpack_from("<BI", blob, pos)
            pos += 5
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            dtype = _DTYPES[tag]
            count = int(np.prod(shape, dtype=np.int64))
            nbytes = count * dtype.itemsize
            if pos + nbytes > len(blob):
                raise CheckpointError(f"{name}: truncated payload")
            out[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
