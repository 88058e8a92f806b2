"""Acceptance criteria, one test per criterion.

Each test prints (and records for the terminal summary) a single line
``criterion N: PASS|FAIL <name> (<evidence>)``.
"""
import csv
import itertools
import math
import time

import numpy as np
import pytest

from starmask.backends import PlantedRegionBackend
from starmask.cli import main as cli_main
from starmask.fixtures import block_texture, disc_mask
from starmask.geometry import (
    AngleGrid,
    area_fraction,
    geometry_gradients,
    grid_starts,
    init_default,
    radius_at,
    spectral_penalty,
)
from starmask.metrics import complexity_entropy, relevance_mass_accuracy, relevance_rank_accuracy, sparseness_gini
from starmask.optimizer import (
    OptimConfig,
    adaptive_area_weight,
    central_difference,
    extremal_loss,
    mask_centroid,
    mask_iou,
    optimize,
    robustness,
    sweep_target_area,
    tau_schedule,
)
from starmask.raster import RasterConfig, mask_vjp, rasterize

from conftest import PLANTED_DISC, random_contour
from test_metrics import brute_entropy, brute_gini, brute_rka, brute_rma

RESULTS: dict[int, str] = {}
T = 2000
CONFIG = OptimConfig(max_iters=T)


def report(number: int, name: str, ok: bool, evidence: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {name} ({evidence})"
    RESULTS[number] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def image():
    return block_texture(64, 64, 3, 2, seed=0)


@pytest.fixture(scope="module")
def backend():
    return PlantedRegionBackend([PLANTED_DISC], pool=2)


@pytest.fixture(scope="module")
def robustness_result(image, backend):
    return robustness(image, backend, grid_starts(3, 0.5), (1e-1, 1e-2, 1e-3), config=CONFIG)


def test_criterion_01_geometry_exactness():
    tic = time.perf_counter()
    rng = np.random.default_rng(2024)
    grid = AngleGrid(64)
    geo_err = raster_err = 0.0
    draws = 0
    while draws < 100:
        p = random_contour(rng)
        if abs((p.r0 - p.r_min) - (p.r_max - p.r0)) < 1e-2:
            continue
        draws += 1
        vec = p.to_vector()
        geo = geometry_gradients(p, grid)
        fd_area = central_difference(lambda v: area_fraction(p.with_vector(v), grid), vec, 1e-6)
        fd_spec = central_difference(lambda v: spectral_penalty(p.with_vector(v)), vec, 1e-6)
        fd_rad = np.stack([central_difference(lambda v, t=t: float(radius_at(p.with_vector(v), t)), vec, 1e-6)
                           for t in grid.angles[::16]])
        for got, ref in [(geo.area, fd_area), (geo.spectral, fd_spec), (geo.radius[::16], fd_rad)]:
            geo_err = max(geo_err, np.linalg.norm(got - ref) / max(np.linalg.norm(ref), 1e-12))
        tau = rng.uniform(2.0, 30.0)
        cot = rng.normal(size=(20, 20))
        got = mask_vjp([p], 20, 20, RasterConfig(tau), cot)[0]
        ref = central_difference(
            lambda v: float(np.sum(cot * rasterize(p.with_vector(v), 20, 20, RasterConfig(tau)).values)), vec, 1e-6)
        raster_err = max(raster_err, np.linalg.norm(got - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - tic
    ok = geo_err < 1e-4 and raster_err < 1e-3 and elapsed < 10.0
    report(1, "geometry exactness", ok,
           f"{draws} draws, geometry rel err {geo_err:.2e}, raster rel err {raster_err:.2e}, {elapsed:.1f}s")


def test_criterion_02_analytic_identities():
    grid = AngleGrid(256)
    area_err = max(abs(area_fraction(init_default(r0=r), grid) - math.pi * r * r / 4)
                   for r in np.linspace(0.15, 0.95, 17))
    lam0 = adaptive_area_weight(0.0, 5.0)
    lam_clip = [adaptive_area_weight(c, 5.0) for c in (0.8, 0.9, 0.999, 1.0)]
    tau0, tau_end = tau_schedule(0, T), tau_schedule(T, T)
    ok = (area_err < 1e-9 and lam0 == 1.0 and all(v == 5.0 for v in lam_clip)
          and tau0 == 1.0 and abs(tau_end - 100.0) < 1e-12)
    report(2, "analytic identities", ok,
           f"circle area err {area_err:.1e}, lambda_a(0)={lam0}, clipped={lam_clip}, tau(0)={tau0}, tau(T)={tau_end:.12g}")


def test_criterion_03_planted_region_recovery(image, backend):
    tic = time.perf_counter()
    res = optimize(image, backend, 1, config=CONFIG, starts=[(0.0, 0.0)])
    elapsed = time.perf_counter() - tic
    p = res.params[0]
    dist = math.hypot(p.center[0] - PLANTED_DISC[0], p.center[1] - PLANTED_DISC[1])
    iou = mask_iou(res.mask.binarize(), disc_mask(64, 64, [PLANTED_DISC]))
    iters = len(res.trace.rows)
    ok = dist <= 0.08 and iou >= 0.7 and iters <= 2000 and elapsed <= 60.0
    report(3, "planted-region recovery", ok,
           f"center error {dist:.4f}, IoU {iou:.3f}, {iters} iterations ({res.trace.stop_reason}), "
           f"best at {res.trace.best_iter}, {elapsed:.1f}s")


def test_criterion_04_multi_start_robustness(robustness_result):
    iou = robustness_result.iou
    off = iou[~np.eye(len(iou), dtype=bool)]
    ok = len(robustness_result.starts) == 9 and bool(np.all(off > 0.8))
    report(4, "multi-start robustness", ok, f"9 starts, min pairwise IoU {off.min():.3f}")


def test_criterion_05_spectral_monotonicity(robustness_result):
    lams = robustness_result.lambda_rs
    spec = robustness_result.sweep_spectral
    order = np.argsort(lams)
    s = [spec[i] for i in order]
    monotone = all(b <= a * 1.05 for a, b in zip(s, s[1:]))
    cents = robustness_result.sweep_centroids
    spread = max(math.dist(a, b) for a, b in itertools.combinations(cents, 2))
    ok = monotone and spread < 0.1
    report(5, "spectral-regularization monotonicity", ok,
           "spectral by lambda_r " + ", ".join(f"{lams[i]:g}:{spec[i]:.4g}" for i in order)
           + f"; centroid spread {spread:.4f}")


def test_criterion_06_fixed_area_sweep(image, backend):
    alphas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]
    pts = sweep_target_area(image, backend, alphas, config=CONFIG, n_random=16)
    area_err = max(abs(p.alpha_achieved - p.alpha_target) for p in pts)
    cos = [p.cos_preserve for p in pts]
    monotone = all(b >= a - 0.02 for a, b in zip(cos, cos[1:]))
    beats = all(p.cos_preserve >= p.baseline_cos_preserve for p in pts)
    ok = area_err <= 0.02 and monotone and beats
    report(6, "fixed-area sweep", ok,
           f"max area error {area_err:.4f}, cos_preserve {[round(c, 4) for c in cos]}, "
           f"random baseline {[round(p.baseline_cos_preserve, 4) for p in pts]}")


def test_criterion_07_multi_contour(image):
    discs = [(-0.45, -0.3, 0.22), (0.45, 0.3, 0.22)]
    be = PlantedRegionBackend(discs, pool=2)
    res = optimize(image, be, 2, config=CONFIG)
    centers = [p.center for p in res.params]
    best = min(
        (max(math.dist(centers[i], discs[j][:2]) for i, j in enumerate(perm)), perm)
        for perm in itertools.permutations(range(2))
    )
    ok = best[0] <= 0.1
    report(7, "multi-contour", ok,
           f"assignment {best[1]}, max center error {best[0]:.4f}, centers {[tuple(round(c, 3) for c in cc) for cc in centers]}")


def test_criterion_08_metric_oracles():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        attr = rng.random((16, 16))
        if seed % 2:
            attr = np.round(attr * 5) / 5
        ann = rng.random((16, 16)) < 0.25
        worst = max(worst,
                    abs(relevance_rank_accuracy(attr, ann) - brute_rka(attr, ann)),
                    abs(relevance_mass_accuracy(attr, ann) - brute_rma(attr, ann)),
                    abs(complexity_entropy(attr) - brute_entropy(attr)),
                    abs(sparseness_gini(attr) - brute_gini(attr)))
    u = np.ones((224, 224))
    ent_err = abs(complexity_entropy(u) - math.log(50176))
    gini = sparseness_gini(u)
    ok = worst < 1e-10 and ent_err < 1e-9 and gini == 0.0
    report(8, "metric oracles", ok, f"max brute-force diff {worst:.1e}, uniform entropy err {ent_err:.1e}, gini {gini}")


def test_criterion_09_extremal_loss_bounds():
    rng = np.random.default_rng(0)
    samples = [extremal_loss(*(rng.normal(size=(3, 32)) * rng.uniform(0.01, 100, size=(3, 1))))
               for _ in range(10000)]
    samples += [extremal_loss(v, s * v, -v) for v in rng.normal(size=(50, 8)) for s in (0.5, 3.0)]
    lo, hi = min(samples), max(samples)
    exact = []
    for _ in range(200):
        a, b = rng.normal(size=(2, 8))
        e_o = np.concatenate([a, b])
        e_d = np.concatenate([-b, a]) * rng.uniform(0.1, 10)  # exactly orthogonal to e_o
        exact.append(extremal_loss(e_o, e_o, e_d))
    ok = -2.0 <= lo and hi <= 2.0 and all(v == -1.0 for v in exact)
    report(9, "extremal-loss bounds", ok, f"sampled range [{lo:.6f}, {hi:.6f}], orthogonal cases all exactly -1: {all(v == -1.0 for v in exact)}")


def _without_timing(path):
    rows = list(csv.reader(open(path)))
    col = rows[0].index("ms_per_iter")
    return [r[:col] + r[col + 1:] for r in rows]


def test_criterion_10_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["synth", "--out", str(data), "--count", "3", "--size", "32"]) == 0
    img = str(data / "image000.png")
    fast = ["--max-iters", "80", "--seed", "7"]
    runs = {
        "explain": (["explain", img, *fast], ["contour.json", "mask.f32"]),
        "sweep": (["sweep", img, "--alphas", "0.1,0.4", "--random-circles", "4", *fast],
                  ["contour_alpha0.10.json", "contour_alpha0.40.json", "sweep.csv"]),
        "robustness": (["robustness", img, "--starts", "4", "--lambda-rs", "0.1,0.01", *fast],
                       ["contour_start0.json", "contour_start3.json", "contour_lambda1.json", "iou_matrix.csv"]),
        "metrics": (["metrics", str(data / "dataset.txt"), "--resamples", "200", "--subsets", "16", *fast],
                    ["metrics.csv", "summary.json"]),
    }
    mismatched = []
    for name, (args, files) in runs.items():
        for rep in ("a", "b"):
            assert cli_main([*args, "--out", str(tmp_path / name / rep)]) == 0
        for f in files:
            if (tmp_path / name / "a" / f).read_bytes() != (tmp_path / name / "b" / f).read_bytes():
                mismatched.append(f"{name}/{f}")
    # the trace must agree everywhere except its wall-clock column
    traces = [_without_timing(tmp_path / "explain" / rep / "trace.csv") for rep in ("a", "b")]
    if traces[0] != traces[1]:
        mismatched.append("explain/trace.csv (timing column excluded)")
    ok = not mismatched
    report(10, "determinism", ok, f"{sum(len(f) for _, f in runs.values()) + 1} artifacts compared, mismatched: {mismatched or 'none'}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
