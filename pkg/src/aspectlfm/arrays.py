"""Versioned little-endian array files.

Layout: 4-byte magic, ``ndim`` as u32, ``ndim`` dimensions as u32, then the
array in row-major order as little-endian float64.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import DataError


def array_bytes(arr: np.ndarray, magic: bytes) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = magic + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.tobytes()


def write_array(path: str | Path, arr: np.ndarray, magic: bytes) -> None:
    Path(path).write_bytes(array_bytes(arr, magic))


def read_array(path: str | Path, magic: bytes) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"array file missing: {path}") from exc
    if data[:4] != magic:
        raise DataError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    (ndim,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    expected = int(np.prod(dims, dtype=np.int64)) * 8
    if len(data) - offset != expected:
        raise DataError(f"{path}: payload is {len(data) - offset} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


def arrays_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
