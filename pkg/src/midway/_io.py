"""Private I/O helpers shared across midway modules."""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import DatasetError, ShapeError

# little-endian: magic, dtype code, rows, cols
_MATRIX_HEADER = struct.Struct("<4sIII")
_MATRIX_MAGIC = b"MWMX"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def iter_text_lines(path: str | Path, *, skip_comments: bool = True) -> Iterator[str]:
    """Yield non-empty data lines from a text file."""
    with open(path, encoding="utf-8", errors="replace") as fh:
        for line in fh:
            if skip_comments and (line.startswith("#") or not line.strip()):
                continue
            yield line.rstrip("\n\r")


def atomic_write_bytes(path: str | Path, data: bytes) -> Path:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def encode_matrix(array: np.ndarray) -> bytes:
    """2-D array as a 16-byte header plus row-major little-endian payload."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got shape {array.shape}")
    dtype = array.dtype.newbyteorder("<") if array.dtype.itemsize > 1 else array.dtype
    if dtype not in _CODES:
        raise ValueError(f"unsupported matrix dtype {array.dtype}")
    rows, cols = array.shape
    header = _MATRIX_HEADER.pack(_MATRIX_MAGIC, _CODES[dtype], rows, cols)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def write_matrix(path: str | Path, array: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_matrix(array))


def read_matrix(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _MATRIX_HEADER.size:
        raise DatasetError(f"{path}: truncated matrix header")
    magic, code, rows, cols = _MATRIX_HEADER.unpack_from(data)
    if magic != _MATRIX_MAGIC or code not in _DTYPES:
        raise DatasetError(f"{path}: not a matrix file")
    dtype = _DTYPES[code]
    payload = data[_MATRIX_HEADER.size:]
    if len(payload) != rows * cols * dtype.itemsize:
        raise DatasetError(
            f"{path}: expected {rows}x{cols} {dtype} payload, got {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).copy()


def write_png(path: str | Path, rgb: np.ndarray) -> Path:
    """Write an (H, W, 3) uint8 array as an 8-bit RGB PNG."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError(f"expected (H, W, 3) uint8 frame, got {rgb.shape} {rgb.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(rgb).save(tmp, format="PNG")
    os.replace(tmp, path)
    return path


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
