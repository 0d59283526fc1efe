"""Portable tensor file (``.fdrt``).

Layout: magic ``FDRT``, version u32, dtype u8 (0=full32, 1=half16), ndim u8,
one u32 per dim, then the little-endian payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"FDRT"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.float16:
        code = 1
    elif arr.dtype == np.float32:
        code = 0
    else:
        raise TypeError(f"fdrt stores float32 or float16 arrays, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions for fdrt")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IBB", VERSION, code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return buf.getvalue()


def decode(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError("bad magic, not an fdrt tensor", offset=0)
    if len(blob) < 10:
        raise FormatError("truncated fdrt header", offset=len(blob))
    version, code, ndim = struct.unpack_from("<IBB", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported fdrt version {version}", offset=4)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset=8)
    head = 10 + 4 * ndim
    if len(blob) < head:
        raise FormatError("truncated fdrt dims", offset=len(blob))
    dims = struct.unpack_from(f"<{ndim}I", blob, 10)
    dtype = _CODES[code]
    need = head + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) != need:
        raise FormatError(f"payload size {len(blob) - head} does not match dims {dims}",
                          offset=min(len(blob), need))
    arr = np.frombuffer(blob, dtype=dtype, offset=head).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes())
