"""Extremal contour optimization.

The objective for contours ``Theta`` on image ``x`` with blurred copy ``x~`` is

    L = -cos(e_p, e_o) + cos(e_d, e_o) + lambda_a * area + lambda_r * sum_k k^2 |w_k|^2

where ``e_o``, ``e_p``, ``e_d`` embed the original, preserved and deleted
images.  ``lambda_a`` is either recomputed every step from ``cos(e_o, e_p)``
(treated as a constant for differentiation) or, in fixed-area mode, the area
term becomes ``lambda_a_fixed * |area - target|``.
"""
from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backends import Backend, cosine_grad, cosine_similarity
from .exceptions import CapabilityError, OptimizationError
from .geometry import (
    AngleGrid,
    ContourParams,
    area_fraction,
    geometry_gradients,
    init_default,
    list_from_vector,
    ring_starts,
    spectral_penalty,
    vector_from_list,
)
from .perturbation import BlurConfig, as_image, compose_delete, compose_preserve, gaussian_blur
from .raster import MaskField, RasterConfig, RasterState, rasterize_multi

log = logging.getLogger(__name__)

R0_MARGIN = 2e-3
STRATEGIES = ("auto", "analytic_chain", "central_fd")
# "sharp": best-so-far and patience use the total loss at tau_inf (stationary);
# "annealed": they use the loss at the scheduled tau of each iteration.
STOP_RULES = ("sharp", "annealed")


@dataclass(frozen=True)
class LossWeights:
    lambda_r: float = 0.01
    lambda_a_cap: float = 5.0
    target_area: float | None = None
    lambda_a_fixed: float = 5.0

    def __post_init__(self):
        if min(self.lambda_r, self.lambda_a_cap, self.lambda_a_fixed) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.target_area is not None and not 0.0 < self.target_area < 1.0:
            raise ValueError(f"target_area must lie in (0, 1), got {self.target_area}")

    @property
    def fixed_area(self) -> bool:
        return self.target_area is not None


@dataclass(frozen=True)
class OptimConfig:
    max_iters: int = 5000
    patience: int = 100
    learning_rate: float = 0.003
    tau0: float = 1.0
    tau_inf: float = 100.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    K: int = 5
    quadrature: int = 256
    seed: int = 0
    gradient: str = "auto"
    fd_step: float = 1e-3
    improvement_tol: float = 1e-6
    stop_on: str = "sharp"
    stop_warmup: float = 0.3

    def __post_init__(self):
        if self.max_iters < 1 or self.patience < 1:
            raise ValueError("max_iters and patience must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (self.tau_inf >= self.tau0 > 0):
            raise ValueError("need tau_inf >= tau0 > 0")
        if self.gradient not in STRATEGIES:
            raise ValueError(f"gradient must be one of {STRATEGIES}")
        if not 0.0 <= self.stop_warmup < 1.0:
            raise ValueError("stop_warmup must lie in [0, 1)")
        if self.stop_on not in STOP_RULES:
            raise ValueError(f"stop_on must be one of {STOP_RULES}")


@dataclass
class LossReport:
    extremal: float
    area: float
    lambda_a: float
    spectral: float
    area_term: float
    total: float
    cos_op: float
    cos_od: float


@dataclass
class TraceRow:
    iter: int
    tau: float
    report: LossReport
    params_hash: str
    ms: float
    selection: float = math.nan


@dataclass
class RunTrace:
    rows: list[TraceRow] = field(default_factory=list)
    stop_reason: str = "max_iters"
    best_iter: int = 0

    def totals(self) -> np.ndarray:
        return np.array([r.report.total for r in self.rows])

    def selection_losses(self) -> np.ndarray:
        return np.array([r.selection for r in self.rows])

    CSV_COLUMNS = ("iter", "tau", "extremal", "area", "lambda_a", "spectral", "total",
                   "cos_op", "cos_od", "ms_per_iter", "selection_total")

    def csv_rows(self):
        for r in self.rows:
            rep = r.report
            yield (r.iter, f"{r.tau:.6g}", f"{rep.extremal:.10g}", f"{rep.area:.10g}",
                   f"{rep.lambda_a:.10g}", f"{rep.spectral:.10g}", f"{rep.total:.10g}",
                   f"{rep.cos_op:.10g}", f"{rep.cos_od:.10g}", f"{r.ms:.4f}", f"{r.selection:.10g}")


# -- loss pieces ------------------------------------------------------------

def extremal_loss(e_o, e_p, e_d) -> float:
    return -cosine_similarity(e_p, e_o) + cosine_similarity(e_d, e_o)


def adaptive_area_weight(cos_op: float, cap: float = 5.0) -> float:
    """min(cap, 1 / (1 - cos_op)); the cap also covers cos_op == 1."""
    gap = 1.0 - float(cos_op)
    if gap <= 0.0:
        return float(cap)
    return float(min(cap, 1.0 / gap))


def tau_schedule(t: float, T: float, tau0: float = 1.0, tau_inf: float = 100.0) -> float:
    return tau0 + 0.5 * (tau_inf - tau0) * (1.0 - math.cos(math.pi * t / T))


def total_loss(params_list: Sequence[ContourParams], e_o, e_p, e_d, weights: LossWeights,
               grid: AngleGrid | None = None, lambda_a: float | None = None) -> LossReport:
    """Assemble the loss; ``lambda_a`` overrides the adaptive weight when given."""
    grid = grid or AngleGrid()
    cos_op = cosine_similarity(e_p, e_o)
    cos_od = cosine_similarity(e_d, e_o)
    extremal = -cos_op + cos_od
    area = sum(area_fraction(p, grid) for p in params_list)
    spectral = sum(spectral_penalty(p) for p in params_list)
    if weights.fixed_area:
        lam = weights.lambda_a_fixed if lambda_a is None else lambda_a
        area_term = lam * abs(area - weights.target_area)
    else:
        lam = adaptive_area_weight(cos_op, weights.lambda_a_cap) if lambda_a is None else lambda_a
        area_term = lam * area
    total = extremal + area_term + weights.lambda_r * spectral
    return LossReport(extremal, area, lam, spectral, area_term, total, cos_op, cos_od)


# -- objective --------------------------------------------------------------

class ContourObjective:
    """Loss and gradients for contours on one image.

    The blurred reference and the original embedding are computed once here.
    """

    def __init__(self, x, backend: Backend, weights: LossWeights = LossWeights(),
                 grid: AngleGrid | None = None, blur: BlurConfig = BlurConfig(), x_blur=None):
        self.x = as_image(x)
        self.x_blur = gaussian_blur(self.x, blur) if x_blur is None else as_image(x_blur)
        self.diff = self.x - self.x_blur
        self.backend = backend
        self.weights = weights
        self.grid = grid or AngleGrid()
        self.height, self.width = self.x.shape[:2]
        self.e_o = np.asarray(backend.embed(self.x), dtype=float)

    def images(self, mask: MaskField | np.ndarray):
        return compose_preserve(self.x, self.x_blur, mask), compose_delete(self.x, self.x_blur, mask)

    def evaluate(self, params_list: Sequence[ContourParams], tau: float,
                 lambda_a: float | None = None) -> LossReport:
        mask = rasterize_multi(params_list, self.height, self.width, RasterConfig(tau))
        x_p, x_d = self.images(mask)
        return total_loss(params_list, self.e_o, self.backend.embed(x_p), self.backend.embed(x_d),
                          self.weights, self.grid, lambda_a)

    def regularizer_gradient(self, params_list: Sequence[ContourParams], report: LossReport) -> list[np.ndarray]:
        """Gradients of the area and spectral terms; lambda_a enters only as a constant."""
        if self.weights.fixed_area:
            gap = report.area - self.weights.target_area
            area_scale = report.lambda_a * float(np.sign(gap))
        else:
            area_scale = report.lambda_a
        out = []
        for p in params_list:
            geo = geometry_gradients(p, self.grid)
            out.append(area_scale * geo.area + self.weights.lambda_r * geo.spectral)
        return out

    def analytic_gradient(self, params_list: Sequence[ContourParams], tau: float,
                          lambda_a: float | None = None) -> tuple[LossReport, np.ndarray]:
        if not self.backend.supports_vjp:
            raise CapabilityError("analytic_chain needs a backend with input_vjp")
        state = RasterState(params_list, self.height, self.width, RasterConfig(tau))
        x_p, x_d = self.images(state.mask)
        e_p = self.backend.embed(x_p)
        e_d = self.backend.embed(x_d)
        report = total_loss(params_list, self.e_o, e_p, e_d, self.weights, self.grid, lambda_a)
        g_xp = self.backend.input_vjp(x_p, -cosine_grad(e_p, self.e_o))
        g_xd = self.backend.input_vjp(x_d, cosine_grad(e_d, self.e_o))
        # d x_p / dm = x - x~, d x_d / dm = x~ - x
        cot_mask = np.sum((g_xp - g_xd) * self.diff, axis=2)
        mask_grads = state.vjp(cot_mask)
        reg = self.regularizer_gradient(params_list, report)
        return report, np.concatenate([g + r for g, r in zip(mask_grads, reg)])

    def fd_gradient(self, params_list: Sequence[ContourParams], tau: float, h: float = 1e-3,
                    lambda_a: float | None = None) -> tuple[LossReport, np.ndarray]:
        report = self.evaluate(params_list, tau, lambda_a)
        lam = report.lambda_a

        def loss(vec):
            return self.evaluate(list_from_vector(params_list, vec), tau, lam).total

        return report, central_difference(loss, vector_from_list(params_list), h)


def central_difference(fn: Callable[[np.ndarray], float], theta, h: float = 1e-3) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for j in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (fn(up) - fn(dn)) / (2.0 * h)
    return grad


def resolve_strategy(strategy: str, backend: Backend) -> str:
    if strategy == "auto":
        return "analytic_chain" if backend.supports_vjp else "central_fd"
    if strategy == "analytic_chain" and not backend.supports_vjp:
        raise CapabilityError("analytic_chain requested but the backend has no input_vjp")
    return strategy


def estimate_gradient(params_list: Sequence[ContourParams], objective: ContourObjective, tau: float,
                      strategy: str = "auto", h: float = 1e-3,
                      lambda_a: float | None = None) -> tuple[LossReport, np.ndarray]:
    """Loss report and flat gradient over every contour's ``2K + 3`` parameters."""
    strategy = resolve_strategy(strategy, objective.backend)
    if strategy == "analytic_chain":
        return objective.analytic_gradient(params_list, tau, lambda_a)
    return objective.fd_gradient(params_list, tau, h, lambda_a)


# -- AdamW ------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n))


def adamw_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float = 0.003,
               betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[np.ndarray, AdamState]:
    """One decoupled-weight-decay Adam update; returns new params and state."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != state.exp_avg.shape:
        raise ValueError(f"gradient size {grads.shape} does not match optimizer state {state.exp_avg.shape}")
    if not np.all(np.isfinite(grads)):
        raise OptimizationError("non-finite gradient")
    b1, b2 = betas
    step = state.step + 1
    exp_avg = b1 * state.exp_avg + (1.0 - b1) * grads
    exp_avg_sq = b2 * state.exp_avg_sq + (1.0 - b2) * grads * grads
    new = np.asarray(params, dtype=float) * (1.0 - lr * weight_decay)
    denom = np.sqrt(exp_avg_sq) / math.sqrt(1.0 - b2**step) + eps
    new = new - (lr / (1.0 - b1**step)) * exp_avg / denom
    return new, AdamState(step, exp_avg, exp_avg_sq)


def _project(params_list: Sequence[ContourParams], vec: np.ndarray) -> list[ContourParams]:
    """Keep centers in the image domain and r0 strictly inside its bounds."""
    vec = vec.copy()
    i = 0
    for p in params_list:
        vec[i:i + 2] = np.clip(vec[i:i + 2], -1.0, 1.0)
        vec[i + 2] = np.clip(vec[i + 2], p.r_min + R0_MARGIN, p.r_max - R0_MARGIN)
        i += p.n_params
    return list_from_vector(params_list, vec)


def params_hash(vec: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(vec, dtype="<f8").tobytes()).hexdigest()[:16]


# -- driver -----------------------------------------------------------------

@dataclass
class OptimizeResult:
    params: list[ContourParams]
    mask: MaskField
    trace: RunTrace
    best: LossReport
    initial: list[ContourParams]
    objective: ContourObjective


def initial_contours(n_contours: int, config: OptimConfig,
                     starts: Sequence[tuple[float, float]] | None = None) -> list[ContourParams]:
    if n_contours < 1:
        raise ValueError("n_contours must be >= 1")
    if starts is None:
        starts = ring_starts(n_contours)
    if len(starts) != n_contours:
        raise ValueError(f"{len(starts)} start points given for {n_contours} contours")
    for i in range(len(starts)):
        for j in range(i):
            if np.allclose(starts[i], starts[j]):
                raise ValueError("initial contour centers must not coincide")
    return [init_default(s, K=config.K) for s in starts]


def optimize(x, backend: Backend, n_contours: int = 1, weights: LossWeights = LossWeights(),
             config: OptimConfig = OptimConfig(), starts: Sequence[tuple[float, float]] | None = None,
             init: Sequence[ContourParams] | None = None, blur: BlurConfig = BlurConfig(),
             objective: ContourObjective | None = None, fixed_tau: float | None = None) -> OptimizeResult:
    """Run the extremal contour loop and return the best contours seen.

    Gradients follow the annealed loss.  Candidates are scored by the total
    loss at ``tau_inf`` (``stop_on="sharp"``) or at the current ``tau``
    (``"annealed"``).  The run stops once the score has not improved on its
    best value by more than ``improvement_tol`` for ``patience`` consecutive
    iterations; the counter only runs after the first ``stop_warmup * T``
    iterations.  ``fixed_tau`` disables the sharpness schedule.
    """
    if objective is None:
        objective = ContourObjective(x, backend, weights, AngleGrid(config.quadrature), blur)
    params = list(init) if init is not None else initial_contours(n_contours, config, starts)
    initial = list(params)
    strategy = resolve_strategy(config.gradient, backend)
    T = config.max_iters
    warmup = int(config.stop_warmup * T) if fixed_tau is None else 0
    state = AdamState.zeros(sum(p.n_params for p in params))
    trace = RunTrace()
    best_total, best_params, best_report, stall = math.inf, params, None, 0

    for t in range(T):
        tic = time.perf_counter()
        tau = fixed_tau if fixed_tau is not None else tau_schedule(t, T, config.tau0, config.tau_inf)
        report, grad = estimate_gradient(params, objective, tau, strategy, config.fd_step)
        if not math.isfinite(report.total):
            raise OptimizationError(f"non-finite loss at iteration {t}")
        if config.stop_on == "sharp" and fixed_tau is None:
            scored = objective.evaluate(params, config.tau_inf)
        else:
            scored = report
        vec = vector_from_list(params)
        trace.rows.append(TraceRow(t, tau, report, params_hash(vec), 0.0, scored.total))
        if scored.total < best_total - config.improvement_tol:
            best_total, best_params, best_report, stall = scored.total, params, scored, 0
            trace.best_iter = t
        elif t >= warmup:
            stall += 1
        if stall >= config.patience:
            trace.stop_reason = "converged"
            trace.rows[-1].ms = (time.perf_counter() - tic) * 1e3
            break
        vec, state = adamw_step(vec, grad, state, config.learning_rate, config.betas,
                                config.eps, config.weight_decay)
        params = _project(params, vec)
        trace.rows[-1].ms = (time.perf_counter() - tic) * 1e3

    final_tau = fixed_tau if fixed_tau is not None else config.tau_inf
    mask = rasterize_multi(best_params, objective.height, objective.width, RasterConfig(final_tau))
    log.debug("stopped after %d iterations (%s), best total %.6f",
              len(trace.rows), trace.stop_reason, best_total)
    return OptimizeResult(best_params, mask, trace, best_report, initial, objective)


# -- sweeps and multi-start ---------------------------------------------------

def target_probability(backend: Backend, x_ref, x) -> float | None:
    """Softmax probability of the reference image's top class, if logits exist."""
    if not backend.supports_logits:
        return None
    target = int(np.argmax(backend.logits(x_ref)))
    z = backend.logits(x)
    z = z - z.max()
    return float(np.exp(z[target]) / np.exp(z).sum())


@dataclass
class SweepPoint:
    alpha_target: float
    alpha_achieved: float
    cos_preserve: float
    cos_delete: float
    prob_preserve: float | None
    prob_delete: float | None
    baseline_cos_preserve: float
    params: list[ContourParams]


def circle_area_radius(alpha: float) -> float:
    return math.sqrt(4.0 * alpha / math.pi)


def random_circle_baseline(objective: ContourObjective, alpha: float, n_circles: int,
                           rng: np.random.Generator, tau: float) -> float:
    """Mean preserve similarity of ``n_circles`` random circles covering area ``alpha``."""
    r = circle_area_radius(alpha)
    sims = []
    for _ in range(n_circles):
        cx, cy = rng.uniform(-1.0, 1.0, size=2)
        circle = ContourParams((cx, cy), r, np.zeros((0, 2)), r_min=r - 1.0, r_max=r + 1.0)
        mask = rasterize_multi([circle], objective.height, objective.width, RasterConfig(tau))
        x_p, _ = objective.images(mask)
        sims.append(cosine_similarity(objective.backend.embed(x_p), objective.e_o))
    return float(np.mean(sims))


def sweep_target_area(x, backend: Backend, alphas: Sequence[float], weights: LossWeights = LossWeights(),
                      config: OptimConfig = OptimConfig(), blur: BlurConfig = BlurConfig(),
                      n_random: int = 16) -> list[SweepPoint]:
    """One fixed-area optimization per target area, each from the default start."""
    alphas = sorted(float(a) for a in alphas)
    if not alphas:
        raise ValueError("at least one target area is required")
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ValueError(f"target area {a} outside (0, 1)")
    base = ContourObjective(x, backend, weights, AngleGrid(config.quadrature), blur)
    rng = np.random.default_rng(config.seed)
    out = []
    for a in alphas:
        w = LossWeights(weights.lambda_r, weights.lambda_a_cap, a, weights.lambda_a_fixed)
        objective = ContourObjective(base.x, backend, w, base.grid, x_blur=base.x_blur)
        res = optimize(base.x, backend, 1, w, config, objective=objective)
        x_p, x_d = objective.images(res.mask)
        out.append(SweepPoint(
            alpha_target=a,
            alpha_achieved=sum(area_fraction(p, base.grid) for p in res.params),
            cos_preserve=cosine_similarity(backend.embed(x_p), base.e_o),
            cos_delete=cosine_similarity(backend.embed(x_d), base.e_o),
            prob_preserve=target_probability(backend, base.x, x_p),
            prob_delete=target_probability(backend, base.x, x_d),
            baseline_cos_preserve=random_circle_baseline(base, a, n_random, rng, config.tau_inf),
            params=res.params,
        ))
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(masks: Sequence[np.ndarray]) -> np.ndarray:
    n = len(masks)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = mask_iou(masks[i], masks[j])
    return out


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    """Centroid of a (soft or binary) mask in normalized coordinates."""
    mask = np.asarray(mask, dtype=float)
    h, w = mask.shape
    total = mask.sum()
    if total <= 0:
        raise ValueError("empty mask has no centroid")
    xs = (2.0 * np.arange(w) + 1.0) / w - 1.0
    ys = (2.0 * np.arange(h) + 1.0) / h - 1.0
    return float(mask.sum(axis=0) @ xs / total), float(mask.sum(axis=1) @ ys / total)


@dataclass
class RobustnessResult:
    starts: list[tuple[float, float]]
    runs: list[OptimizeResult]
    iou: np.ndarray
    lambda_rs: list[float]
    sweep_runs: list[OptimizeResult]

    @property
    def sweep_spectral(self) -> list[float]:
        return [sum(spectral_penalty(p) for p in r.params) for r in self.sweep_runs]

    @property
    def sweep_centroids(self) -> list[tuple[float, float]]:
        return [mask_centroid(r.mask.binarize()) for r in self.sweep_runs]


def robustness(x, backend: Backend, starts: Sequence[tuple[float, float]],
               lambda_rs: Sequence[float] = (1e-1, 1e-2, 1e-3), weights: LossWeights = LossWeights(),
               config: OptimConfig = OptimConfig(), blur: BlurConfig = BlurConfig()) -> RobustnessResult:
    """Multi-start runs plus a spectral-weight sweep from the default start."""
    base = ContourObjective(x, backend, weights, AngleGrid(config.quadrature), blur)
    runs = [optimize(base.x, backend, 1, weights, config, starts=[s], objective=base) for s in starts]
    iou = iou_matrix([r.mask.binarize() for r in runs])
    sweep = []
    for lam in lambda_rs:
        w = LossWeights(lam, weights.lambda_a_cap, weights.target_area, weights.lambda_a_fixed)
        obj = ContourObjective(base.x, backend, w, base.grid, x_blur=base.x_blur)
        sweep.append(optimize(base.x, backend, 1, w, config, objective=obj))
    return RobustnessResult(list(starts), runs, iou, list(lambda_rs), sweep)
