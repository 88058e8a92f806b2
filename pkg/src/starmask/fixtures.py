"""Synthetic images for the planted-region oracle."""
from __future__ import annotations

import numpy as np

from .raster import pixel_centers


def block_texture(height: int = 64, width: int = 64, channels: int = 3, block: int = 2,
                  seed: int = 0, density: float = 0.5, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    """Random two-level texture made of ``block`` x ``block`` squares.

    Heavy blur flattens it to its mean, which makes blurred and original
    content easy for a pooled-luminance backend to tell apart.
    """
    rng = np.random.default_rng(seed)
    bh, bw = -(-height // block), -(-width // block)
    levels = np.where(rng.random((bh, bw)) < density, high, low)
    tex = np.repeat(np.repeat(levels, block, 0), block, 1)[:height, :width]
    return np.repeat(tex[..., None], channels, axis=2)


def disc_mask(height: int, width: int, discs) -> np.ndarray:
    """Boolean union of discs ``(cx, cy, r)`` given in normalized coordinates."""
    xs, ys = pixel_centers(height, width)
    out = np.zeros((height, width), dtype=bool)
    for cx, cy, r in discs:
        out |= (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    return out


def disc_area_fraction(r: float) -> float:
    return float(np.pi * r * r / 4.0)
