"""ATAF binary tensor container.

Layout (little-endian):
    magic ``ATAF`` (4 bytes)
    version: u32 (= 1)
    dtype:   u8  (1 = IEEE-754 float32)
    rank:    u8
    padding to the next 8-byte boundary (6 zero bytes)
    dims:    rank x u64
    payload: row-major float32

The payload round-trips bit-exactly: values are stored as float32 and must
already be float32 on write.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import AtafError

MAGIC = b"ATAF"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sIBB6x")  # 16 bytes, 8-aligned


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` to ``path`` as an ATAF container.

    The array is converted to contiguous float32; a lossy conversion from a
    wider float dtype is the caller's responsibility to avoid if bit-exactness
    matters.
    """
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.size == 0:
        raise AtafError("empty matrix")
    if not np.all(np.isfinite(arr)):
        flat = arr.reshape(arr.shape[0], -1)
        row = int(np.where(~np.isfinite(flat).all(axis=1))[0][0])
        raise AtafError(f"non-finite value in row {row}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an ATAF container back into a float32 array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise AtafError(f"{path}: truncated header")
    magic, version, dtype, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise AtafError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise AtafError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise AtafError(f"{path}: unsupported dtype code {dtype}")
    if rank < 1:
        raise AtafError(f"{path}: rank must be >= 1, got {rank}")
    offset = _HEADER.size
    if len(data) < offset + 8 * rank:
        raise AtafError(f"{path}: truncated dimension block")
    dims = struct.unpack_from(f"<{rank}Q", data, offset)
    offset += 8 * rank
    count = int(np.prod(dims))
    expected = offset + 4 * count
    if len(data) != expected:
        raise AtafError(f"{path}: payload size {len(data) - offset}, expected {4 * count}")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
    return arr.reshape(dims).copy()
