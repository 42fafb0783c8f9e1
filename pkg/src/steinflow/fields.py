"""Lattice field helpers.

A lattice field is a float64 ndarray of shape (H, W, N, C): two spatial axes,
a frame axis, and channels. Masks share the spatial/frame layout with a single
channel, (H, W, N, 1), and broadcast against fields.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

FieldShape = tuple[int, int, int, int]

FRAME_AXIS = 2


def as_field(values, shape: FieldShape | None = None) -> np.ndarray:
    """Coerce to a float64 lattice field, optionally checking the shape."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 4:
        raise ContractViolation(f"lattice field must be 4-d, got shape {arr.shape}")
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ContractViolation(f"expected field shape {shape}, got {arr.shape}")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "fields") -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what} differ in shape: {a.shape} vs {b.shape}")


def constant_field(shape: FieldShape, value: float) -> np.ndarray:
    return np.full(shape, float(value), dtype=np.float64)


def sinusoid_field(
    shape: FieldShape,
    amplitude: float = 1.0,
    spatial_period: float = 4.0,
    frame_period: float = 8.0,
    phase: float = 0.0,
) -> np.ndarray:
    """Smooth deterministic reference field: a travelling spatiotemporal wave.

    Stands in for an externally supplied reference trajectory in toy runs.
    """
    h, w, n, c = shape
    ii, jj, kk, _ = np.meshgrid(
        np.arange(h), np.arange(w), np.arange(n), np.arange(c), indexing="ij"
    )
    arg = (
        2.0 * np.pi * (ii + jj) / max(spatial_period, 1e-9)
        + 2.0 * np.pi * kk / max(frame_period, 1e-9)
        + phase
    )
    return (amplitude * np.sin(arg)).astype(np.float64)


def standard_normal_field(rng: np.random.Generator, shape: FieldShape) -> np.ndarray:
    return rng.standard_normal(shape)
