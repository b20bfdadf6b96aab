"""NTSR binary tensor files.

Layout: ``b"NTSR"``, version byte 0x01, dtype byte (0x01 f64, 0x02 u8),
little-endian u32 rank, rank little-endian u32 extents, raw little-endian
payload in row-major order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from protoalign.errors import FormatError

MAGIC = b"NTSR"
VERSION = 1
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype("float64"): 1, np.dtype("uint8"): 2}


def encode(array) -> bytes:
    arr = np.asarray(array)
    code = CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; NTSR stores float64 or uint8")
    header = MAGIC + bytes([VERSION, code]) + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:4] != MAGIC:
        raise FormatError("bad magic; not an NTSR file")
    if buf[4] != VERSION:
        raise FormatError(f"unsupported NTSR version {buf[4]}")
    dtype = DTYPES.get(buf[5])
    if dtype is None:
        raise FormatError(f"unknown dtype code {buf[5]}")
    (rank,) = struct.unpack_from("<I", buf, 6)
    offset = 10 + 4 * rank
    if len(buf) < offset:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 10)
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - offset != count * dtype.itemsize:
        raise FormatError(f"payload size mismatch for shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
