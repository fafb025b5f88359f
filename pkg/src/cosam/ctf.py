"""CTF1 tensor files.

Layout: magic ``CTF1``, u8 dtype code (0 = f32, 1 = f64), u8 rank,
rank x u64 little-endian dims, then the raw little-endian elements.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"CTF1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CTFError(ValueError):
    pass


def encode(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        arr = arr.astype(np.float64)
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.require(arr.astype(arr.dtype.newbyteorder("<"), copy=False), requirements="C")
    code = _CODES[np.dtype(arr.dtype)]
    if arr.ndim > 255:
        raise CTFError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_from(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise CTFError(f"bad magic {magic!r}")
    code, rank = struct.unpack("<BB", stream.read(2))
    if code not in _DTYPES:
        raise CTFError(f"unknown dtype code {code}")
    dims = struct.unpack(f"<{rank}Q", stream.read(8 * rank))
    dtype = _DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    raw = stream.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise CTFError("truncated CTF1 payload")
    return np.frombuffer(raw, dtype=dtype).reshape(dims).copy()


def decode(blob: bytes) -> np.ndarray:
    return decode_from(io.BytesIO(blob))


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_from(fh)
