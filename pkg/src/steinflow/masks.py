"""Mask algebra: per-cell weights routing lattice regions to score models.

Masks live in [0,1]^{H,W,N,1}. The context mask is always derived from the
foreground and simulation masks via

    context = (1 - fg) * (1 - sim)

so the three never double-count a cell.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import ContractViolation, DomainError

MaskShape = tuple[int, int, int, int]


def as_mask(values, shape: MaskShape | None = None) -> np.ndarray:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 4 or m.shape[3] != 1:
        raise ContractViolation(f"mask must have shape (H, W, N, 1), got {m.shape}")
    if shape is not None and m.shape != tuple(shape):
        raise ContractViolation(f"expected mask shape {shape}, got {m.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise DomainError("mask entries must lie in [0, 1]")
    return m


def context_mask(fg: np.ndarray, sim: np.ndarray) -> np.ndarray:
    return (1.0 - fg) * (1.0 - sim)


def smooth_mask(values: np.ndarray, dilation_radius: int = 1, blur_sigma: float = 0.5) -> np.ndarray:
    """Dilate over the (H, W, N) axes by a box of half-width ``radius``, then
    Gaussian-blur and clamp back into [0, 1]. Identity for radius=0, sigma=0.
    """
    if dilation_radius < 0 or blur_sigma < 0:
        raise DomainError("dilation radius and blur sigma must be >= 0")
    out = np.asarray(values, dtype=np.float64)
    if dilation_radius > 0:
        size = 2 * dilation_radius + 1
        out = ndimage.grey_dilation(out, size=(size, size, size, 1), mode="nearest")
    if blur_sigma > 0:
        out = ndimage.gaussian_filter(out, sigma=(blur_sigma, blur_sigma, blur_sigma, 0.0))
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class MaskSet:
    """Foreground / simulation / derived context masks plus the fg prior.

    ``prior_fg`` is the originally configured foreground mask that refinement
    decays back toward when a cell stops deviating.
    """

    fg: np.ndarray
    sim: np.ndarray
    context: np.ndarray
    prior_fg: np.ndarray

    @classmethod
    def from_masks(cls, fg, sim) -> "MaskSet":
        fg = as_mask(fg)
        sim = as_mask(sim, shape=fg.shape)
        return cls(fg=fg, sim=sim, context=context_mask(fg, sim), prior_fg=fg.copy())

    def smoothed(self, dilation_radius: int, blur_sigma: float) -> "MaskSet":
        """Smooth fg and sim, rederive the context mask, keep the prior."""
        fg = smooth_mask(self.fg, dilation_radius, blur_sigma)
        sim = smooth_mask(self.sim, dilation_radius, blur_sigma)
        return replace(self, fg=fg, sim=sim, context=context_mask(fg, sim))


def refine_masks(
    xhat0: np.ndarray,
    z0: np.ndarray,
    masks: MaskSet,
    threshold: float,
    decay: float = 0.5,
) -> MaskSet:
    """Threshold rule standing in for a learned mask tracker.

    Cells (outside the simulation mask) whose clean prediction deviates from
    the reference by more than ``threshold`` in any channel become foreground;
    all other cells decay toward the configured prior. The context mask is
    rederived so the partition identity keeps holding.
    """
    if threshold < 0:
        raise DomainError("refinement threshold must be >= 0")
    dev = np.max(np.abs(xhat0 - z0), axis=-1, keepdims=True)
    exceed = (dev > threshold) & (masks.sim < 0.5)
    decayed = masks.prior_fg + decay * (masks.fg - masks.prior_fg)
    fg = np.where(exceed, 1.0, decayed)
    return replace(masks, fg=fg, context=context_mask(fg, masks.sim))
