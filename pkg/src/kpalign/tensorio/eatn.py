"""EATN: a tiny binary container for dense float32 tensors.

Layout (little endian)::

    offset 0   b"EATN"
    offset 4   version (0x01)
    offset 5   ndim (1..4)
    offset 6   two zero pad bytes
    offset 8   ndim x u32 dims
    ...        prod(dims) x float32, row-major
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"EATN"
VERSION = 1
MAX_NDIM = 4
MAX_ELEMENTS = 2**31 - 1


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class InvalidHeaderError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class DimsOverflowError(TensorFormatError):
    pass


class TrailingDataError(TensorFormatError):
    pass


def _as_tensor(t) -> np.ndarray:
    a = np.asarray(t)
    if a.ndim < 1 or a.ndim > MAX_NDIM:
        raise InvalidHeaderError(f"tensor must have 1..{MAX_NDIM} dims, got {a.ndim}")
    if any(d <= 0 for d in a.shape):
        raise InvalidHeaderError(f"all dims must be positive, got {a.shape}")
    if a.size > MAX_ELEMENTS:
        raise DimsOverflowError(f"{a.size} elements exceeds the format limit")
    return np.ascontiguousarray(a, dtype="<f4")


def encode_tensor(t) -> bytes:
    a = _as_tensor(t)
    header = MAGIC + bytes([VERSION, a.ndim, 0, 0])
    dims = struct.pack(f"<{a.ndim}I", *a.shape)
    return header + dims + a.tobytes(order="C")


def write_tensor(t, sink: BinaryIO) -> None:
    sink.write(encode_tensor(t))


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if data is None or len(data) != n:
        got = 0 if data is None else len(data)
        raise TruncatedError(f"truncated {what}: expected {n} bytes, got {got}")
    return data


def read_tensor(source: BinaryIO) -> np.ndarray:
    """Read one tensor; returns a float32 array of the stored shape."""
    header = source.read(8)
    if header is None or len(header) < 4:
        raise TruncatedError("truncated header")
    if header[:4] != MAGIC:
        raise BadMagicError(f"bad magic {header[:4]!r}")
    if len(header) < 8:
        raise TruncatedError("truncated header")
    version, ndim, pad0, pad1 = header[4], header[5], header[6], header[7]
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if not 1 <= ndim <= MAX_NDIM:
        raise InvalidHeaderError(f"ndim must be 1..{MAX_NDIM}, got {ndim}")
    if pad0 or pad1:
        raise InvalidHeaderError("non-zero pad bytes")
    dims = struct.unpack(f"<{ndim}I", _read_exact(source, 4 * ndim, "dims"))
    if any(d == 0 for d in dims):
        raise InvalidHeaderError(f"zero-length dim in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimsOverflowError(f"dims {dims} describe {count} elements")
    payload = _read_exact(source, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def decode_tensor(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    out = read_tensor(buf)
    if buf.tell() != len(data):
        raise TrailingDataError(f"{len(data) - buf.tell()} trailing bytes after tensor")
    return out


def save_tensor(path: Union[str, os.PathLike], t) -> None:
    with open(path, "wb") as fh:
        write_tensor(t, fh)


def load_tensor(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
