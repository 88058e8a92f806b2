"""Soft rasterization of star-convex contours and its exact adjoint."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import EmptyContourSetError, ShapeMismatchError
from .geometry import ContourParams, fourier_series

FLOAT_DUMP_MAGIC = b"SMASKF32"


@dataclass(frozen=True)
class RasterConfig:
    tau: float = 1.0
    interior_high: bool = True

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.interior_high:
            raise ValueError("only interior_high=True is supported")


def pixel_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) coordinates of pixel centers, each of shape (H, W)."""
    if height < 1 or width < 1:
        raise ValueError("height and width must be >= 1")
    xs = (2.0 * np.arange(width) + 1.0) / width - 1.0
    ys = (2.0 * np.arange(height) + 1.0) / height - 1.0
    return np.meshgrid(xs, ys)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _harmonics(ct: np.ndarray, st: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """cos(k theta), sin(k theta) for k = 1..K via angle addition; last axis is k."""
    cos_kt = np.empty(ct.shape + (K,))
    sin_kt = np.empty(ct.shape + (K,))
    c, s = ct, st
    for k in range(K):
        cos_kt[..., k] = c
        sin_kt[..., k] = s
        c, s = c * ct - s * st, s * ct + c * st
    return cos_kt, sin_kt


class _Field:
    """Per-pixel polar quantities for one contour, kept for the adjoint."""

    def __init__(self, params: ContourParams, xs: np.ndarray, ys: np.ndarray, tau: float):
        self.params = params
        self.tau = tau
        dx = xs - params.center[0]
        dy = ys - params.center[1]
        rho = np.hypot(dx, dy)
        at_center = rho == 0.0
        safe = np.where(at_center, 1.0, rho)
        # theta = 0 at the center pixel
        ct = np.where(at_center, 1.0, dx / safe)
        st = np.where(at_center, 0.0, dy / safe)
        self.cos_kt, self.sin_kt = _harmonics(ct, st, params.K)
        self.dx, self.dy, self.rho, self.safe, self.at_center = dx, dy, rho, safe, at_center
        f = fourier_series(params, self.cos_kt, self.sin_kt)
        self.tanh_f = np.tanh(f)
        self.radius = params.r0 + params.scale * self.tanh_f
        self.mask = _sigmoid(tau * (self.radius - rho))

    def param_jacobian_contract(self, weight: np.ndarray) -> np.ndarray:
        """sum_p weight(p) * d(r(theta_p) - rho_p)/d(vector)."""
        p = self.params
        K = p.K
        s = p.scale
        t = self.tanh_f
        sech2 = 1.0 - t * t
        g = np.zeros(p.n_params)
        # direct dependence of r on r0 and coefficients
        g[2] = np.sum(weight * (1.0 + p.scale_slope * t))
        if K:
            ws = weight * s * sech2
            flat_w = ws.ravel()
            g[3::2] = flat_w @ self.cos_kt.reshape(-1, K)
            g[4::2] = -(flat_w @ self.sin_kt.reshape(-1, K))
            k = np.arange(1, K + 1)
            # d/dtheta of the Fourier sum
            df = -(self.sin_kt @ (k * p.coeffs[:, 0])) - (self.cos_kt @ (k * p.coeffs[:, 1]))
            dr_dtheta = s * sech2 * df
        else:
            dr_dtheta = np.zeros_like(self.rho)
        inv = 1.0 / self.safe
        inv2 = inv * inv
        live = ~self.at_center
        wl = np.where(live, weight, 0.0)
        g[0] = np.sum(wl * (dr_dtheta * self.dy * inv2 + self.dx * inv))
        g[1] = np.sum(wl * (-dr_dtheta * self.dx * inv2 + self.dy * inv))
        return g


@dataclass
class MaskField:
    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binarize(self, level: float = 0.5) -> np.ndarray:
        return self.values > level


def rasterize(params: ContourParams, height: int, width: int, cfg: RasterConfig) -> MaskField:
    xs, ys = pixel_centers(height, width)
    return MaskField(_Field(params, xs, ys, cfg.tau).mask)


def rasterize_multi(params_list: Sequence[ContourParams], height: int, width: int,
                    cfg: RasterConfig) -> MaskField:
    """Pixel-wise maximum over the soft masks of several contours."""
    if len(params_list) == 0:
        raise EmptyContourSetError("at least one contour is required")
    xs, ys = pixel_centers(height, width)
    masks = np.stack([_Field(p, xs, ys, cfg.tau).mask for p in params_list])
    return MaskField(masks.max(axis=0))


class RasterState:
    """Forward pass for several contours that can be differentiated afterwards."""

    def __init__(self, params_list: Sequence[ContourParams], height: int, width: int, cfg: RasterConfig):
        if len(params_list) == 0:
            raise EmptyContourSetError("at least one contour is required")
        xs, ys = pixel_centers(height, width)
        self.fields = [_Field(p, xs, ys, cfg.tau) for p in params_list]
        stack = np.stack([f.mask for f in self.fields])
        self.owner = np.argmax(stack, axis=0)  # first index wins ties
        self.mask = MaskField(np.take_along_axis(stack, self.owner[None], axis=0)[0])

    def vjp(self, cotangent: np.ndarray) -> list[np.ndarray]:
        cotangent = np.asarray(cotangent, dtype=float)
        if cotangent.shape != self.mask.values.shape:
            raise ShapeMismatchError(
                f"cotangent shape {cotangent.shape} != mask shape {self.mask.values.shape}"
            )
        grads = []
        for i, f in enumerate(self.fields):
            w = np.where(self.owner == i, cotangent * f.mask * (1.0 - f.mask) * f.tau, 0.0)
            grads.append(f.param_jacobian_contract(w))
        return grads


def mask_vjp(params_list: Sequence[ContourParams], height: int, width: int, cfg: RasterConfig,
             cotangent: np.ndarray) -> list[np.ndarray]:
    """Per-contour gradients of sum_p cotangent(p) * mask(p)."""
    return RasterState(params_list, height, width, cfg).vjp(cotangent)


def mask_to_uint8(mask: MaskField | np.ndarray) -> np.ndarray:
    values = mask.values if isinstance(mask, MaskField) else np.asarray(mask)
    return np.clip(np.round(255.0 * values), 0, 255).astype(np.uint8)


def encode_float_dump(mask: MaskField | np.ndarray) -> bytes:
    """16-byte header (8-byte magic, uint32 H, uint32 W, little endian) + row-major float32."""
    values = mask.values if isinstance(mask, MaskField) else np.asarray(mask)
    h, w = values.shape
    return FLOAT_DUMP_MAGIC + struct.pack("<II", h, w) + values.astype("<f4").tobytes(order="C")


def decode_float_dump(blob: bytes) -> np.ndarray:
    if blob[:8] != FLOAT_DUMP_MAGIC:
        raise ValueError("not a mask float dump (bad magic)")
    h, w = struct.unpack("<II", blob[8:16])
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != h * w:
        raise ValueError(f"float dump truncated: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(float)
