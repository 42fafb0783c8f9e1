"""Flat binary container for lattice fields.

Layout: a 16-byte header (12-byte magic, little-endian uint32 format version),
four little-endian uint32 dims (H, W, N, C), then the raw little-endian
float32 payload. Trivially parseable from any language and byte-stable, so
artifact hashes are reproducible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation

MAGIC = b"STEINFLOWTEN"
FORMAT_VERSION = 1

_HEAD = struct.Struct("<12sI")
_DIMS = struct.Struct("<4I")


def write_tensor(path: str | Path, field: np.ndarray) -> None:
    field = np.asarray(field)
    if field.ndim != 4:
        raise ContractViolation(f"tensor files hold 4-d fields, got shape {field.shape}")
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, FORMAT_VERSION))
        f.write(_DIMS.pack(*field.shape))
        f.write(np.ascontiguousarray(field, dtype="<f4").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEAD.size + _DIMS.size:
        raise ContractViolation(f"{path}: truncated tensor file")
    magic, version = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ContractViolation(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContractViolation(f"{path}: unsupported format version {version}")
    dims = _DIMS.unpack_from(raw, _HEAD.size)
    start = _HEAD.size + _DIMS.size
    count = int(np.prod(dims))
    expected = start + 4 * count
    if len(raw) != expected:
        raise ContractViolation(f"{path}: payload is {len(raw) - start} bytes, dims imply {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
    return data.reshape(dims).astype(np.float64)


def write_stack(directory: str | Path, prefix: str, fields: np.ndarray) -> list[Path]:
    """Write a (K, H, W, N, C) stack as numbered tensor files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, field in enumerate(fields):
        p = directory / f"{prefix}_{i:04d}.tensor"
        write_tensor(p, field)
        paths.append(p)
    return paths
