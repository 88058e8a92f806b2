"""Explanation quality metrics over (H, W) attribution maps.

Locality: relevance rank accuracy and relevance mass accuracy against a
boolean annotation.  Complexity: Shannon entropy (natural log) of the
normalized attribution and the Gini index of its absolute values.
Faithfulness: correlation between subset attribution mass and the score drop
caused by blurring that subset.  ``bootstrap_ci`` gives percentile intervals.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import Backend, cosine_similarity
from .exceptions import ShapeMismatchError, UndefinedMetricError
from .perturbation import BlurConfig, as_image, gaussian_blur

METRIC_NAMES = ("rka", "rma", "complexity", "sparseness", "faithfulness")


def _pair(attr, ann) -> tuple[np.ndarray, np.ndarray]:
    attr = np.asarray(attr, dtype=float)
    ann = np.asarray(ann, dtype=bool)
    if attr.shape != ann.shape:
        raise ShapeMismatchError(f"attribution {attr.shape} and annotation {ann.shape} differ")
    if not ann.any():
        raise UndefinedMetricError("annotation has no positive pixels")
    return attr.ravel(), ann.ravel()


def _mass(attr: np.ndarray) -> float:
    total = float(np.sum(attr))
    if not total > 0:
        raise UndefinedMetricError("attribution has zero total mass")
    return total


def relevance_rank_accuracy(attr, ann) -> float:
    """Fraction of the top-k attributed pixels inside the annotation, k = |annotation|.

    Ties are broken in row-major order.
    """
    a, m = _pair(attr, ann)
    if not np.any(a != 0):
        raise UndefinedMetricError("attribution is all zero")
    k = int(m.sum())
    top = np.argsort(-a, kind="stable")[:k]
    return float(m[top].sum() / k)


def relevance_mass_accuracy(attr, ann) -> float:
    a, m = _pair(attr, ann)
    return float(a[m].sum() / _mass(a))


def complexity_entropy(attr) -> float:
    a = np.asarray(attr, dtype=float).ravel()
    p = a / _mass(a)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def sparseness_gini(attr) -> float:
    a = np.sort(np.abs(np.asarray(attr, dtype=float).ravel()))
    n = a.size
    total = _mass(a)
    i = np.arange(1, n + 1)
    return float(np.sum((2 * i - n - 1) * a) / (n * total))


@dataclass(frozen=True)
class FaithfulnessConfig:
    subsets: int = 64
    subset_fraction: float = 0.05
    subset_size: int | None = None
    seed: int = 0
    score: str = "auto"  # auto | cosine | probability | logit

    def size_for(self, n_pixels: int) -> int:
        if self.subset_size is not None:
            return int(self.subset_size)
        return max(1, int(round(self.subset_fraction * n_pixels)))


def _scorer(backend: Backend, x: np.ndarray, mode: str):
    if mode == "auto":
        mode = "probability" if backend.supports_logits else "cosine"
    if mode == "cosine":
        e_o = backend.embed(x)
        return lambda img: cosine_similarity(e_o, backend.embed(img))
    target = int(np.argmax(backend.logits(x)))
    if mode == "logit":
        return lambda img: float(backend.logits(img)[target])
    if mode == "probability":
        def prob(img):
            z = backend.logits(img)
            z = z - z.max()
            return float(np.exp(z[target]) / np.exp(z).sum())
        return prob
    raise ValueError(f"unknown score mode {mode!r}")


def faithfulness_correlation(attr, x, backend: Backend, cfg: FaithfulnessConfig = FaithfulnessConfig(),
                             blur: BlurConfig = BlurConfig(), x_blur=None) -> float:
    """Pearson correlation between subset attribution mass and score drop.

    Each of ``cfg.subsets`` random pixel subsets is replaced by the blurred
    image; the drop is ``score(x) - score(x_perturbed)``.
    """
    x = as_image(x)
    attr = np.asarray(attr, dtype=float)
    if attr.shape != x.shape[:2]:
        raise ShapeMismatchError(f"attribution {attr.shape} does not match image {x.shape[:2]}")
    if cfg.subsets < 2:
        raise ValueError("need at least two subsets")
    x_blur = gaussian_blur(x, blur) if x_blur is None else as_image(x_blur)
    score = _scorer(backend, x, cfg.score)
    base = score(x)
    h, w = attr.shape
    n = h * w
    size = cfg.size_for(n)
    rng = np.random.default_rng(cfg.seed)
    flat_attr = attr.ravel()
    masses, drops = np.empty(cfg.subsets), np.empty(cfg.subsets)
    for i in range(cfg.subsets):
        idx = rng.choice(n, size=size, replace=False)
        pert = x.reshape(n, -1).copy()
        pert[idx] = x_blur.reshape(n, -1)[idx]
        masses[i] = flat_attr[idx].sum()
        drops[i] = base - score(pert.reshape(x.shape))
    if np.ptp(masses) == 0 or np.ptp(drops) == 0:
        raise UndefinedMetricError("attribution mass or score drop has zero variance")
    return float(np.corrcoef(masses, drops)[0, 1])


def bootstrap_ci(samples, level: float = 0.95, resamples: int = 10000, seed: int = 0) -> tuple[float, float, float]:
    """Sample mean with a percentile bootstrap interval."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("bootstrap needs at least two samples")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(resamples, x.size))].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return float(x.mean()), float(lo), float(hi)


def evaluate_all(attr, ann, x=None, backend: Backend | None = None,
                 faith: FaithfulnessConfig = FaithfulnessConfig(), blur: BlurConfig = BlurConfig(),
                 x_blur=None) -> dict[str, float]:
    out = {
        "rka": relevance_rank_accuracy(attr, ann),
        "rma": relevance_mass_accuracy(attr, ann),
        "complexity": complexity_entropy(attr),
        "sparseness": sparseness_gini(attr),
    }
    if x is not None and backend is not None:
        try:
            out["faithfulness"] = faithfulness_correlation(attr, x, backend, faith, blur, x_blur)
        except UndefinedMetricError:
            out["faithfulness"] = float("nan")
    return out
