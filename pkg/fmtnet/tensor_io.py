"""Binary tensor files.

Layout, all little-endian: magic ``TNSR``, format version (u32), dtype code (u32:
0 = float64, 1 = int32), rank (u32), one u32 per dimension, then the row-major payload.
"""
import os
import struct

import numpy as np

from fmtnet.errors import InvalidArgument

MAGIC = b"TNSR"
FORMAT_VERSION = 1

DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}


def _dtype_code(array: np.ndarray) -> int:
    if np.issubdtype(array.dtype, np.floating):
        return 0
    if np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        return 1
    raise InvalidArgument(f"unsupported dtype {array.dtype}")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _dtype_code(array)
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
    if payload[:4] != MAGIC:
        raise InvalidArgument("not a tensor file (bad magic)")
    try:
        version, code, rank = struct.unpack_from("<III", payload, 4)
    except struct.error:
        raise InvalidArgument("tensor file header is truncated")
    if version != FORMAT_VERSION:
        raise InvalidArgument(f"unsupported tensor format version {version}")
    if code not in DTYPE_CODES:
        raise InvalidArgument(f"unknown dtype code {code}")
    offset = 16
    if len(payload) < offset + 4 * rank:
        raise InvalidArgument(f"tensor file header is truncated (rank {rank})")
    try:
        shape = struct.unpack_from(f"<{rank}I", payload, offset)
    except struct.error:
        raise InvalidArgument(f"tensor file header is truncated (rank {rank})")
    offset += 4 * rank
    dtype = DTYPE_CODES[code]
    count = int(np.prod(shape)) if rank else 1
    body = payload[offset:]
    if len(body) != count * dtype.itemsize:
        raise InvalidArgument(f"tensor payload has {len(body)} bytes, expected {count * dtype.itemsize}")
    array = np.frombuffer(body, dtype=dtype).reshape(shape)
    return array.astype(np.float64 if code == 0 else np.int32)


def write_tensor(path: str, array: np.ndarray) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(encode_tensor(array))


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as handle:
        return decode_tensor(handle.read())
