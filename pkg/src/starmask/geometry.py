"""Star-convex contours described by a bounded truncated Fourier series.

A contour is centred at ``center`` (normalized ``[-1, 1]^2`` coordinates) and
has radius

    r(theta) = r0 + s * tanh(Re sum_k w_k exp(i k theta)),
    s = min(r0 - r_min, r_max - r0),

so it always stays inside ``[r_min, r_max]``.  The learnable vector of one
contour is ``[cx, cy, r0, re_1, im_1, ..., re_K, im_K]`` (``2K + 3`` values).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .exceptions import BoundsError, DomainError, ResolutionError

DOMAIN_AREA = 4.0  # area of [-1, 1]^2
R_MIN = 0.1
R_MAX = 1.0
DEFAULT_R0 = 0.5
DEFAULT_K = 5
DEFAULT_M = 256


@dataclass(frozen=True)
class ContourParams:
    center: tuple[float, float]
    r0: float
    coeffs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    r_min: float = R_MIN
    r_max: float = R_MAX

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1, 2)
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "r0", float(self.r0))
        if not (self.r_min < self.r0 < self.r_max):
            raise BoundsError(
                f"r0={self.r0} must lie strictly inside (r_min={self.r_min}, r_max={self.r_max})"
            )

    @property
    def K(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_params(self) -> int:
        return 2 * self.K + 3

    @property
    def scale(self) -> float:
        """Bound scale s = min(r0 - r_min, r_max - r0)."""
        return min(self.r0 - self.r_min, self.r_max - self.r0)

    @property
    def scale_slope(self) -> float:
        """d(scale)/d(r0); the tie point takes the r0 - r_min branch."""
        return 1.0 if (self.r0 - self.r_min) <= (self.r_max - self.r0) else -1.0

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.center[0], self.center[1], self.r0], self.coeffs.ravel()])

    def with_vector(self, vec: Sequence[float]) -> "ContourParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} values, got shape {vec.shape}")
        return ContourParams(
            center=(vec[0], vec[1]),
            r0=vec[2],
            coeffs=vec[3:].reshape(-1, 2),
            r_min=self.r_min,
            r_max=self.r_max,
        )

    def shifted(self, dx: float, dy: float) -> "ContourParams":
        return ContourParams((self.center[0] + dx, self.center[1] + dy), self.r0, self.coeffs,
                             self.r_min, self.r_max)

    def rotated(self, phi: float) -> "ContourParams":
        """Rotate the shape by ``phi`` about its center (w_k -> w_k exp(-i k phi))."""
        w = self.coeffs[:, 0] + 1j * self.coeffs[:, 1]
        k = np.arange(1, self.K + 1)
        w = w * np.exp(-1j * k * phi)
        return ContourParams(self.center, self.r0, np.stack([w.real, w.imag], axis=1),
                             self.r_min, self.r_max)

    def to_dict(self) -> dict:
        return {
            "center": [self.center[0], self.center[1]],
            "r0": self.r0,
            "coeffs": [[float(a), float(b)] for a, b in self.coeffs],
            "r_min": self.r_min,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ContourParams":
        return cls(
            center=tuple(doc["center"]),
            r0=doc["r0"],
            coeffs=np.asarray(doc.get("coeffs", []), dtype=float).reshape(-1, 2),
            r_min=doc.get("r_min", R_MIN),
            r_max=doc.get("r_max", R_MAX),
        )


def contours_to_json(params_list: Iterable[ContourParams]) -> str:
    """Serialize contours; one contour gives a bare object, several give a list."""
    docs = [p.to_dict() for p in params_list]
    payload = docs[0] if len(docs) == 1 else docs
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def contours_from_json(text: str) -> list[ContourParams]:
    doc = json.loads(text)
    if isinstance(doc, dict):
        doc = [doc]
    return [ContourParams.from_dict(d) for d in doc]


class AngleGrid:
    """``m`` uniformly spaced angles on ``[0, 2*pi)``."""

    def __init__(self, m: int = DEFAULT_M):
        if m < 8:
            raise ResolutionError(f"angle grid needs at least 8 samples, got {m}")
        self.m = int(m)
        self.angles = 2.0 * np.pi * np.arange(self.m) / self.m
        self.step = 2.0 * np.pi / self.m

    def __len__(self) -> int:
        return self.m


def _harmonics(params: ContourParams, theta: np.ndarray):
    k = np.arange(1, params.K + 1)
    kt = np.multiply.outer(theta, k)
    return k, np.cos(kt), np.sin(kt)


def fourier_series(params: ContourParams, cos_kt: np.ndarray, sin_kt: np.ndarray) -> np.ndarray:
    """Re sum_k w_k e^{ik theta} given precomputed cos(k theta), sin(k theta) (last axis = k)."""
    if params.K == 0:
        return np.zeros(cos_kt.shape[:-1])
    return cos_kt @ params.coeffs[:, 0] - sin_kt @ params.coeffs[:, 1]


def radius_at(params: ContourParams, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    _, c, s = _harmonics(params, theta)
    return params.r0 + params.scale * np.tanh(fourier_series(params, c, s))


def radius_profile(params: ContourParams, grid: AngleGrid) -> np.ndarray:
    return radius_at(params, grid.angles)


def area_fraction(params: ContourParams, grid: AngleGrid | None = None) -> float:
    """Enclosed area as a fraction of the [-1, 1]^2 domain (trapezoidal quadrature)."""
    grid = grid or AngleGrid()
    r = radius_profile(params, grid)
    return float(np.sum(r * r) * grid.step / (2.0 * DOMAIN_AREA))


def spectral_penalty(params: ContourParams) -> float:
    k = np.arange(1, params.K + 1)
    return float(np.sum(k**2 * np.sum(params.coeffs**2, axis=1)))


@dataclass
class GeometryGradients:
    """Partials over the full contour vector (center columns are zero)."""

    radius: np.ndarray  # (M, 2K+3)
    area: np.ndarray  # (2K+3,)
    spectral: np.ndarray  # (2K+3,)


def radius_jacobian(params: ContourParams, theta: np.ndarray, cos_kt=None, sin_kt=None) -> tuple[np.ndarray, np.ndarray]:
    """Return (r(theta), dr/dvector) with shape (..., 2K+3)."""
    if cos_kt is None:
        _, cos_kt, sin_kt = _harmonics(params, np.asarray(theta, dtype=float))
    f = fourier_series(params, cos_kt, sin_kt)
    t = np.tanh(f)
    s = params.scale
    r = params.r0 + s * t
    sech2 = 1.0 - t * t
    jac = np.zeros(r.shape + (params.n_params,))
    jac[..., 2] = 1.0 + params.scale_slope * t
    jac[..., 3::2] = (s * sech2)[..., None] * cos_kt
    jac[..., 4::2] = -(s * sech2)[..., None] * sin_kt
    return r, jac


def geometry_gradients(params: ContourParams, grid: AngleGrid | None = None) -> GeometryGradients:
    grid = grid or AngleGrid()
    r, jac = radius_jacobian(params, grid.angles)
    area = (2.0 * r) @ jac * grid.step / (2.0 * DOMAIN_AREA)
    spectral = np.zeros(params.n_params)
    k = np.arange(1, params.K + 1)
    spectral[3::2] = 2.0 * k**2 * params.coeffs[:, 0]
    spectral[4::2] = 2.0 * k**2 * params.coeffs[:, 1]
    return GeometryGradients(radius=jac, area=area, spectral=spectral)


def init_default(start: tuple[float, float] = (0.0, 0.0), K: int = DEFAULT_K,
                 r0: float = DEFAULT_R0, r_min: float = R_MIN, r_max: float = R_MAX) -> ContourParams:
    """Zero-coefficient circle of radius ``r0`` at ``start``."""
    x, y = start
    if not (-1.0 <= x <= 1.0 and -1.0 <= y <= 1.0):
        raise DomainError(f"start point {start} lies outside [-1, 1]^2")
    return ContourParams((x, y), r0, np.zeros((K, 2)), r_min, r_max)


def grid_starts(n_side: int = 3, extent: float = 0.5) -> list[tuple[float, float]]:
    """``n_side`` x ``n_side`` start centers on a regular lattice spanning ``[-extent, extent]^2``."""
    ticks = np.linspace(-extent, extent, n_side) if n_side > 1 else np.zeros(1)
    return [(float(x), float(y)) for y in ticks for x in ticks]


def ring_starts(n: int, radius: float = 0.4) -> list[tuple[float, float]]:
    """Evenly spaced centers on a circle around the image center."""
    if n == 1:
        return [(0.0, 0.0)]
    angles = 2.0 * np.pi * np.arange(n) / n
    return [(float(radius * np.cos(a)), float(radius * np.sin(a))) for a in angles]


def vector_from_list(params_list: Sequence[ContourParams]) -> np.ndarray:
    return np.concatenate([p.to_vector() for p in params_list])


def list_from_vector(template: Sequence[ContourParams], vec: np.ndarray) -> list[ContourParams]:
    out, i = [], 0
    for p in template:
        out.append(p.with_vector(vec[i:i + p.n_params]))
        i += p.n_params
    return out
