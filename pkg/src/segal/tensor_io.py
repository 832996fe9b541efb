"""TSR1 tensor files.

Layout: magic bytes ``TSR1``, u32 little-endian ndim, ndim u32
little-endian dims, then float32 little-endian data in row-major order.
All images, masks, and particle checkpoints use this format.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"TSR1"
_MAX_NDIM = 16


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    """Write ``array`` as TSR1.  Data is stored as float32 (lossy for float64)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a TSR1 file back as a float32 array."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a TSR1 file (bad magic)")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    if ndim > _MAX_NDIM:
        raise TensorFormatError(f"{path}: implausible ndim {ndim}")
    header_end = 8 + 4 * ndim
    if len(raw) < header_end:
        raise TensorFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    if len(raw) - header_end < 4 * count:
        raise TensorFormatError(f"{path}: truncated data (expected {count} float32 values)")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=header_end)
    return data.reshape(shape).copy()
