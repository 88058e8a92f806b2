"""Blurred reference images and the preserve/delete compositions.

Images are ``(H, W, C)`` float arrays with values in ``[0, 1]`` and ``C`` in
``{1, 3}``; masks are ``(H, W)`` and broadcast over channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import KernelSizeError, ShapeMismatchError
from .raster import MaskField

DEFAULT_KERNEL = 21
DEFAULT_SIGMA = 20.0


@dataclass(frozen=True)
class BlurConfig:
    kernel_size: int = DEFAULT_KERNEL
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if self.kernel_size < 3 or self.kernel_size % 2 == 0:
            raise KernelSizeError(f"kernel_size must be odd and >= 3, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def as_image(x) -> np.ndarray:
    """Validate and return ``x`` as a float (H, W, C) array."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise ShapeMismatchError(f"expected an (H, W, C) image with C in {{1, 3}}, got {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return x


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - size // 2
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    half = kernel.size // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (half, half)
    padded = np.pad(x, pad, mode="edge")
    windows = sliding_window_view(padded, kernel.size, axis=axis)
    return windows @ kernel


def gaussian_blur(x, cfg: BlurConfig = BlurConfig()) -> np.ndarray:
    """Separable, normalized Gaussian blur with edge replication at the borders."""
    x = as_image(x)
    h, w = x.shape[:2]
    if cfg.kernel_size > 2 * min(h, w) + 1:
        raise KernelSizeError(
            f"kernel_size {cfg.kernel_size} too large for a {h}x{w} image"
        )
    kernel = gaussian_kernel(cfg.kernel_size, cfg.sigma)
    out = _blur_axis(_blur_axis(x, kernel, axis=0), kernel, axis=1)
    return np.clip(out, 0.0, 1.0)


def _mask_values(x: np.ndarray, x_blur: np.ndarray, m) -> np.ndarray:
    values = m.values if isinstance(m, MaskField) else np.asarray(m, dtype=float)
    if x.shape != x_blur.shape or values.shape != x.shape[:2]:
        raise ShapeMismatchError(
            f"shape mismatch: image {x.shape}, blurred {x_blur.shape}, mask {values.shape}"
        )
    return values[..., None]


def compose_preserve(x: np.ndarray, x_blur: np.ndarray, m) -> np.ndarray:
    """Keep ``x`` where the mask is high, blurred content elsewhere."""
    mv = _mask_values(x, x_blur, m)
    return mv * x + (1.0 - mv) * x_blur


def compose_delete(x: np.ndarray, x_blur: np.ndarray, m) -> np.ndarray:
    """Blur the masked region, keep ``x`` elsewhere."""
    mv = _mask_values(x, x_blur, m)
    return (1.0 - mv) * x + mv * x_blur
