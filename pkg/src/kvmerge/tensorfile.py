"""Single-tensor binary files.

Layout (little-endian)::

    magic    4 bytes  b"KVSL"
    version  u32      1
    dtype    u8       0 = float32, 1 = float64
    ndim     u8
    reserved 2 bytes  zero
    dims     ndim x u64
    payload  row-major scalars, prod(dims) elements
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagic, BadVersion, TensorFormatError

MAGIC = b"KVSL"
VERSION = 1
_HEADER = struct.Struct("<4sIBB2s")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    code = _CODES.get(a.dtype.newbyteorder("="))
    if code is None:
        raise TensorFormatError(f"unsupported dtype {a.dtype}; use float32 or float64")
    if a.ndim > 255:
        raise TensorFormatError("too many dimensions")
    header = _HEADER.pack(MAGIC, VERSION, code, a.ndim, b"\0\0")
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
    return header + dims + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFormatError("file shorter than header")
    magic, version, code, ndim, reserved = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if reserved != b"\0\0":
        raise TensorFormatError("reserved header bytes must be zero")
    off = _HEADER.size
    if len(buf) < off + 8 * ndim:
        raise TensorFormatError("truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    dt = _DTYPES[code]
    expected = dt.itemsize * int(np.prod(dims, dtype=np.uint64))
    if len(buf) - off != expected:
        raise TensorFormatError(f"payload has {len(buf) - off} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).copy()


def write_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
