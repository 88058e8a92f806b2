"""Extremal contour explanations: smooth star-convex masks optimized against an image embedding."""
from __future__ import annotations

__version__ = "0.1.0"

from .backends import (
    Backend,
    ExternalBackend,
    LinearProjectionBackend,
    PlantedRegionBackend,
    cosine_similarity,
)
from .exceptions import StarmaskError
from .geometry import (
    AngleGrid,
    ContourParams,
    area_fraction,
    contours_from_json,
    contours_to_json,
    init_default,
    radius_at,
    spectral_penalty,
)
from .metrics import (
    FaithfulnessConfig,
    bootstrap_ci,
    complexity_entropy,
    evaluate_all,
    faithfulness_correlation,
    relevance_mass_accuracy,
    relevance_rank_accuracy,
    sparseness_gini,
)
from .optimizer import (
    ContourObjective,
    LossWeights,
    OptimConfig,
    optimize,
    robustness,
    sweep_target_area,
)
from .perturbation import BlurConfig, compose_delete, compose_preserve, gaussian_blur
from .raster import RasterConfig, mask_vjp, rasterize, rasterize_multi

__all__ = [name for name in dir() if not name.startswith("_")]
