"""Binary container for real n-dimensional arrays.

Layout: the magic bytes ``QPATARR\\0``, a little-endian u32 version (1),
a u32 dimension count, one u64 per dimension, then the values as
little-endian float64 in row-major order.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

MAGIC = b"QPATARR\0"
VERSION = 1
_HEAD = struct.Struct("<8sII")


class ArrayFileError(ValueError):
    pass


def encode(array) -> bytes:
    a = np.asarray(array)
    if not np.isrealobj(a):
        raise ArrayFileError("only real arrays can be stored")
    a = np.ascontiguousarray(a, dtype="<f8").reshape(a.shape)
    head = _HEAD.pack(MAGIC, VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise ArrayFileError("truncated header")
    magic, version, ndim = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise ArrayFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ArrayFileError(f"unsupported version {version}")
    off = _HEAD.size
    if len(buf) < off + 8 * ndim:
        raise ArrayFileError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(buf) != off + 8 * count:
        raise ArrayFileError(f"payload has {len(buf) - off} bytes, expected {8 * count}")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)


def write_array(path, array) -> str:
    """Write ``array`` and return the sha256 digest of the file contents."""
    data = encode(array)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
