"""Bit-exact tensor container format (DFM1).

Layout of a single ``.dfm`` file, all integers little-endian:

    magic   "DFM1"            4 bytes
    dtype   u8                1 = float32, 2 = int64
    rank    u8
    dims    u32 * rank
    payload row-major little-endian array data
    digest  SHA-256 of payload, 32 bytes

The format is deliberately minimal so any language can read it back
byte-for-byte and verify integrity without a deserialization library.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DFM1"

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODE_FOR_KIND = {"f": 1, "i": 2}


class ContainerError(Exception):
    """Raised when a DFM1 file is malformed or fails its integrity check."""


def write_tensor(path: str | Path, array: np.ndarray) -> Path:
    """Write ``array`` to ``path`` in DFM1 format.

    float arrays are stored as float32, integer arrays as int64.
    """
    path = Path(path)
    if array.dtype.kind == "f":
        data = np.ascontiguousarray(array, dtype="<f4")
    elif array.dtype.kind in ("i", "u"):
        data = np.ascontiguousarray(array, dtype="<i8")
    else:
        raise ContainerError(f"unsupported dtype {array.dtype}")
    code = _CODE_FOR_KIND[data.dtype.kind]

    payload = data.tobytes(order="C")
    header = MAGIC + struct.pack("<BB", code, data.ndim)
    header += struct.pack(f"<{data.ndim}I", *data.shape)
    digest = hashlib.sha256(payload).digest()

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(digest)
    return path


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a DFM1 tensor, verifying magic, shape, and payload digest."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ContainerError(f"missing container file: {path}") from None

    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ContainerError(f"bad magic bytes in {path}")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPE_CODES:
        raise ContainerError(f"unknown dtype code {code} in {path}")
    dtype = _DTYPE_CODES[code]

    dims_end = 6 + 4 * rank
    if len(raw) < dims_end:
        raise ContainerError(f"truncated header in {path}")
    dims = struct.unpack_from(f"<{rank}I", raw, 6)

    n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload_end = dims_end + n_items * dtype.itemsize
    if len(raw) != payload_end + 32:
        raise ContainerError(
            f"size mismatch in {path}: expected {payload_end + 32} bytes, got {len(raw)}"
        )

    payload = raw[dims_end:payload_end]
    if hashlib.sha256(payload).digest() != raw[payload_end:]:
        raise ContainerError(f"payload digest mismatch in {path}")

    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def payload_sha256(path: str | Path) -> str:
    """Hex SHA-256 of the payload section (the digest stored in the file)."""
    raw = Path(path).read_bytes()
    if len(raw) < 36 or raw[:4] != MAGIC:
        raise ContainerError(f"bad magic bytes in {path}")
    return raw[-32:].hex()
