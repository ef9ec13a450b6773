"""RBM1 binary matrix files (plus CSV for small matrices).

Layout: the 8-byte magic ``b"RBMAT\\0\\0\\x01"``, rows and cols as unsigned
64-bit little-endian integers, then the row-major float64 little-endian payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RBMAT\x00\x00\x01"
_HEADER = struct.Struct("<8sQQ")


class MatrixFormatError(ValueError):
    pass


def write_matrix(m, path: str | os.PathLike) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("refusing to write a matrix with non-finite entries")
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, m, delimiter=",", fmt="%.17g")
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, m.shape[0], m.shape[1]))
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise MatrixFormatError(f"{path}: truncated header ({len(data)} bytes)")
    magic, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: header magic mismatch {magic!r}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) < expected:
        raise MatrixFormatError(f"{path}: truncated payload, expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise MatrixFormatError(f"{path}: {len(data) - expected} trailing bytes after payload")
    payload = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=_HEADER.size)
    return payload.reshape(rows, cols).astype(np.float64)
