"""Reader/writer for the FOST binary tensor format.

Layout (little-endian)::

    b"FOST" | u32 version=1 | u32 rank | rank x u64 extents | u8 dtype | data

``dtype`` is 0 for float64 and 1 for float32; data is row-major.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"FOST"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class FostFormatError(ValueError):
    pass


def encode(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", code)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FostFormatError(f"{source}: bad magic bytes {buf[:4]!r}")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FostFormatError(f"{source}: unsupported FOST version {version}")
    off = 12
    if len(buf) < off + 8 * rank + 1:
        raise FostFormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    code = buf[off]
    off += 1
    if code not in _DTYPES:
        raise FostFormatError(f"{source}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    need = count * dtype.itemsize
    if len(buf) - off != need:
        raise FostFormatError(f"{source}: expected {need} data bytes, found {len(buf) - off}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path: str | os.PathLike, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), source=os.fspath(path))
