"""Binary array-block codec shared by the shard and checkpoint containers.

One block is: u8 rank, rank x u32 dims, u8 dtype code (0=f32, 1=u8), then the
little-endian payload. All multi-byte integers are little-endian.
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Type

import numpy as np

from .errors import ShardTruncatedError

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_FOR_KIND = {np.dtype("<f4"): 0, np.dtype("u1"): 1}


def read_exact(f: BinaryIO, n: int, error: Type[Exception] = ShardTruncatedError) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise error(f"expected {n} bytes, got {len(data)} (file truncated?)")
    return data


def write_array_block(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    elif arr.dtype == np.uint8:
        arr = arr.astype("u1", copy=False)
    else:
        raise ValueError(f"array blocks support float32 and uint8, got {arr.dtype}")
    code = _CODE_FOR_KIND[arr.dtype]
    if arr.ndim > 255:
        raise ValueError("array rank exceeds container limit")
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<I", dim))
    f.write(struct.pack("<B", code))
    f.write(arr.tobytes(order="C"))


def read_array_block(f: BinaryIO, error: Type[Exception] = ShardTruncatedError) -> np.ndarray:
    (rank,) = struct.unpack("<B", read_exact(f, 1, error))
    dims = tuple(
        struct.unpack("<I", read_exact(f, 4, error))[0] for _ in range(rank)
    )
    (code,) = struct.unpack("<B", read_exact(f, 1, error))
    if code not in DTYPE_CODES:
        raise error(f"unknown dtype code {code}")
    dtype = DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = read_exact(f, count * dtype.itemsize, error)
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
