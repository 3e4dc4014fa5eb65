"""SAFT tensor container.

Layout (all little-endian)::

    offset  size        field
    0       4           magic, ASCII "SAFT"
    4       1           version (currently 1)
    5       1           dtype code
    6       1           ndim, 1..4
    7       4 * ndim    shape, uint32 each
    ...     ...         payload, row-major scalars

Dtype codes: 1=float32, 2=float64, 3=complex64 (interleaved float32
real/imag pairs), 4=uint8, 5=int32.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"SAFT"
VERSION = 1

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<c8"),
    4: np.dtype("u1"),
    5: np.dtype("<i4"),
}
_CODE_OF = {dt: code for code, dt in DTYPE_CODES.items()}


class ContainerError(ValueError):
    """Base class for malformed or unsupported containers."""


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class UnknownDtypeError(ContainerError):
    pass


def _code_for(dtype: np.dtype) -> int:
    code = _CODE_OF.get(np.dtype(dtype).newbyteorder("<"))
    if code is None:
        code = _CODE_OF.get(np.dtype(dtype))
    if code is None:
        raise UnknownDtypeError(f"unsupported dtype {dtype}")
    return code


def encode_tensor(data: np.ndarray) -> bytes:
    """Serialize an array to SAFT bytes."""
    arr = np.asarray(data)
    code = _code_for(arr.dtype)
    if not 1 <= arr.ndim <= 4:
        raise ContainerError(f"ndim must be in [1, 4], got {arr.ndim}")
    if any(s > 0xFFFFFFFF for s in arr.shape):
        raise ContainerError("dimension exceeds uint32 range")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse SAFT bytes back into an array (a fresh, writable copy)."""
    if len(buf) < 7:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise BadMagicError("bad magic")
        raise TruncatedError("header truncated")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}")
    _version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if code not in DTYPE_CODES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise ContainerError(f"ndim must be in [1, 4], got {ndim}")
    shape_end = 7 + 4 * ndim
    if len(buf) < shape_end:
        raise TruncatedError("shape truncated")
    shape = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = buf[shape_end:]
    if len(payload) < expected:
        raise TruncatedError(f"payload has {len(payload)} bytes, header promises {expected}")
    if len(payload) > expected:
        raise ContainerError(f"{len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path, data: np.ndarray) -> None:
    """Write ``data`` to ``path`` atomically (temp file + rename)."""
    blob = encode_tensor(data)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())
