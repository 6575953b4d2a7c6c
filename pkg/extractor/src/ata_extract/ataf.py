"""Writer for the ATAF tensor container (the routing side reads these files).

Layout, little-endian: magic ``ATAF``, u32 version 1, u8 dtype (1 = float32),
u8 rank, 6 padding bytes, rank x u64 dims, row-major float32 payload. Writes
go through a temp file in the target directory and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ExtractError

_MAGIC = b"ATAF"
_VERSION = 1
_DTYPE_F32 = 1


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.size == 0:
        raise ExtractError("refusing to write an empty tensor")
    if not np.all(np.isfinite(arr)):
        raise ExtractError("refusing to write non-finite values")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = (
        struct.pack("<4sIBB6x", _MAGIC, _VERSION, _DTYPE_F32, arr.ndim)
        + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        + arr.tobytes(order="C")
    )
    atomic_write_bytes(path, blob)


def atomic_write_bytes(path: Path, blob: bytes) -> None:
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(path, text.encode("utf-8"))
