"""Command line interface: ``starmask explain | sweep | robustness | metrics``.

Every option can also be given in a ``key = value`` config file passed with
``--config``; command-line flags override file values.  Exit codes: 0 success,
1 optimization failure, 2 I/O or usage error, 3 backend/protocol error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .backends import Backend, ExternalBackend, LinearProjectionBackend, PlantedRegionBackend
from .exceptions import (
    BackendError,
    CapabilityError,
    DegenerateEmbeddingError,
    OptimizationError,
    UndefinedMetricError,
)
from .fileio import (
    InputError,
    file_sha256,
    read_annotation,
    read_config,
    read_dataset_manifest,
    read_image,
    write_csv,
    write_image,
    write_json,
    write_mask,
    write_text,
)
from .geometry import contours_to_json, grid_starts, spectral_penalty
from .metrics import METRIC_NAMES, FaithfulnessConfig, bootstrap_ci, evaluate_all
from .optimizer import (
    STOP_RULES,
    STRATEGIES,
    LossWeights,
    OptimConfig,
    RobustnessResult,
    RunTrace,
    iou_matrix,
    optimize,
    sweep_target_area,
)
from .perturbation import BlurConfig

log = logging.getLogger("starmask")

EXIT_OK, EXIT_OPTIM, EXIT_IO, EXIT_BACKEND = 0, 1, 2, 3
DEFAULT_ALPHAS = "0.1,0.2,0.3,0.4,0.5,0.6,0.7"


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class BackendRecipe:
    """Picklable recipe for a backend, so worker processes can build their own."""

    kind: str
    discs: tuple = ((0.3, -0.2, 0.25),)
    pool: int = 2
    embed_dim: int = 16
    seed: int = 0
    endpoint: str | None = None

    def build(self, dims: tuple[int, int, int]) -> Backend:
        if self.kind == "planted":
            return PlantedRegionBackend(self.discs, pool=self.pool)
        if self.kind == "linear":
            return LinearProjectionBackend(dims, embed_dim=self.embed_dim, seed=self.seed)
        if self.kind == "external":
            if not self.endpoint:
                raise UsageError("--endpoint is required for the external backend")
            return ExternalBackend(self.endpoint)
        raise UsageError(f"unknown backend {self.kind!r}")


# -- argument handling ------------------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _point(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected 'x,y', got {text!r}")
    return vals[0], vals[1]


def _disc(text: str) -> tuple[float, float, float]:
    vals = _floats(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected 'cx,cy,r', got {text!r}")
    return vals[0], vals[1], vals[2]


def _common_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run")
    g.add_argument("--config", help="key = value config file (flags override it)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="starmask-out", help="output directory")
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--log-level", default="WARNING")
    g = p.add_argument_group("backend")
    g.add_argument("--backend", default="planted", choices=["planted", "linear", "external"])
    g.add_argument("--endpoint", help="external backend: command line or tcp://host:port")
    g.add_argument("--disc", type=_disc, action="append", help="planted region disc cx,cy,r (repeatable)")
    g.add_argument("--pool", type=int, default=2)
    g.add_argument("--embed-dim", type=int, default=16)
    g = p.add_argument_group("optimization")
    g.add_argument("--contours", type=int, default=1)
    g.add_argument("--start", type=_point, action="append", help="initial center x,y (repeatable)")
    g.add_argument("--max-iters", type=int, default=5000)
    g.add_argument("--patience", type=int, default=100)
    g.add_argument("--lr", type=float, default=0.003)
    g.add_argument("--tau0", type=float, default=1.0)
    g.add_argument("--tau-inf", type=float, default=100.0)
    g.add_argument("--beta1", type=float, default=0.9)
    g.add_argument("--beta2", type=float, default=0.999)
    g.add_argument("--adam-eps", type=float, default=1e-8)
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--K", dest="K", type=int, default=5)
    g.add_argument("--quadrature", type=int, default=256)
    g.add_argument("--gradient", choices=STRATEGIES, default="auto")
    g.add_argument("--fd-step", type=float, default=1e-3)
    g.add_argument("--stop-on", choices=STOP_RULES, default="sharp")
    g.add_argument("--stop-warmup", type=float, default=0.3)
    g.add_argument("--lambda-r", type=float, default=0.01)
    g.add_argument("--lambda-a-cap", type=float, default=5.0)
    g.add_argument("--lambda-a-fixed", type=float, default=5.0)
    g.add_argument("--target-area", type=float, default=None)
    g.add_argument("--kernel-size", type=int, default=21)
    g.add_argument("--sigma", type=float, default=20.0)
    g.add_argument("--resolution", type=int, default=None,
                   help="resize inputs to this square size (metrics default 224)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="starmask", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", parents=[common], help="optimize contours for one image")
    p.add_argument("image")

    p = sub.add_parser("sweep", parents=[common], help="fixed-area sweep over target areas")
    p.add_argument("image")
    p.add_argument("--alphas", default=DEFAULT_ALPHAS, help="comma separated target area fractions")
    p.add_argument("--random-circles", type=int, default=16)

    p = sub.add_parser("robustness", parents=[common], help="multi-start and spectral-weight study")
    p.add_argument("image")
    p.add_argument("--starts", type=int, default=9, help="number of start centers (a square number)")
    p.add_argument("--grid-extent", type=float, default=0.5)
    p.add_argument("--lambda-rs", default="0.1,0.01,0.001")

    p = sub.add_parser("metrics", parents=[common], help="metric table over an annotated dataset")
    p.add_argument("manifest", help="lines of 'image annotation [id]'")
    p.add_argument("--subsets", type=int, default=64)
    p.add_argument("--subset-fraction", type=float, default=0.05)
    p.add_argument("--faithfulness-score", default="auto", choices=["auto", "cosine", "probability", "logit"])
    p.add_argument("--ci-level", type=float, default=0.95)
    p.add_argument("--resamples", type=int, default=10000)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic annotated dataset")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--block", type=int, default=2)
    return parser


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        file_values = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, value in file_values.items():
            if key not in actions or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            action = actions[key]
            if isinstance(action, argparse._AppendAction):
                defaults[key] = [action.type(v) for v in value.split(";") if v.strip()]
            else:
                defaults[key] = action.type(value) if action.type else value
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def backend_recipe(args) -> BackendRecipe:
    discs = tuple(tuple(d) for d in (args.disc or [(0.3, -0.2, 0.25)]))
    return BackendRecipe(args.backend, discs, args.pool, args.embed_dim, args.seed, args.endpoint)


def optim_config(args) -> OptimConfig:
    return OptimConfig(
        max_iters=args.max_iters, patience=args.patience, learning_rate=args.lr,
        tau0=args.tau0, tau_inf=args.tau_inf, betas=(args.beta1, args.beta2), eps=args.adam_eps,
        weight_decay=args.weight_decay, K=args.K, quadrature=args.quadrature, seed=args.seed,
        gradient=args.gradient, fd_step=args.fd_step, stop_on=args.stop_on, stop_warmup=args.stop_warmup,
    )


def loss_weights(args) -> LossWeights:
    return LossWeights(args.lambda_r, args.lambda_a_cap, args.target_area, args.lambda_a_fixed)


def blur_config(args) -> BlurConfig:
    return BlurConfig(args.kernel_size, args.sigma)


def resolved_config(args) -> dict:
    doc = {k: v for k, v in vars(args).items() if k not in ("config",)}
    return {k: (list(map(list, v)) if k in ("disc", "start") and v else v) for k, v in doc.items()}


def config_text(args) -> str:
    """Resolved options as a config file that replays the run."""
    lines = [f"# starmask {__version__} {args.command}"]
    skip = {"command", "config", "image", "manifest"}
    for key, value in sorted(vars(args).items()):
        if key in skip or value is None:
            continue
        if key in ("disc", "start"):
            value = ";".join(",".join(repr(float(c)) for c in item) for item in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _map(fn: Callable, tasks: list, workers: int) -> list:
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _load(args, path) -> np.ndarray:
    return read_image(path, args.resolution)


def write_manifest(args, out: Path, inputs: Sequence[str], extra: dict) -> None:
    doc = {
        "version": __version__,
        "command": args.command,
        "config": resolved_config(args),
        "inputs": {str(p): file_sha256(p) for p in inputs},
    }
    doc.update(extra)
    write_text(out / "resolved.cfg", config_text(args))
    write_json(out / "manifest.json", doc)


def write_trace(path, trace: RunTrace) -> None:
    write_csv(path, RunTrace.CSV_COLUMNS, trace.csv_rows())


# -- commands ---------------------------------------------------------------

def cmd_explain(args) -> int:
    from . import plotting

    tic = time.perf_counter()
    out = Path(args.out)
    x = _load(args, args.image)
    backend = backend_recipe(args).build(x.shape)
    try:
        res = optimize(x, backend, args.contours, loss_weights(args), optim_config(args),
                       starts=args.start, blur=blur_config(args))
        x_p, x_d = res.objective.images(res.mask)
    finally:
        backend.close()
    write_text(out / "contour.json", contours_to_json(res.params))
    write_text(out / "initial_contour.json", contours_to_json(res.initial))
    write_mask(out / "mask.png", out / "mask.f32", res.mask)
    write_image(out / "preserve.png", x_p)
    write_image(out / "delete.png", x_d)
    write_trace(out / "trace.csv", res.trace)
    plotting.save_figure(plotting.overlay_figure(x, res.initial, res.params), out / "overlay.png")
    plotting.save_figure(plotting.panels_figure(x, res.mask.values, x_p, x_d), out / "panels.png")
    plotting.save_figure(plotting.convergence_figure(res.trace), out / "convergence.png")
    write_manifest(args, out, [args.image], {
        "stop_reason": res.trace.stop_reason,
        "iterations": len(res.trace.rows),
        "best_iteration": res.trace.best_iter,
        "best_loss": asdict(res.best),
        "wall_clock_s": time.perf_counter() - tic,
        "contour_json": str(out / "contour.json"),
    })
    print(f"{args.image}: {res.trace.stop_reason} after {len(res.trace.rows)} iterations, "
          f"loss {res.best.total:.5f}, area {res.best.area:.4f} -> {out}")
    return EXIT_OK


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.10g}"


def cmd_sweep(args) -> int:
    from . import plotting

    alphas = _floats(args.alphas)
    if not alphas:
        raise UsageError("--alphas must list at least one target area")
    if any(not 0 < a < 1 for a in alphas):
        raise UsageError("target areas must lie in (0, 1)")
    tic = time.perf_counter()
    out = Path(args.out)
    x = _load(args, args.image)
    backend = backend_recipe(args).build(x.shape)
    try:
        points = sweep_target_area(x, backend, alphas, loss_weights(args), optim_config(args),
                                   blur_config(args), n_random=args.random_circles)
    finally:
        backend.close()
    header = ["alpha_target", "alpha_achieved", "cos_preserve", "cos_delete",
              "prob_preserve", "prob_delete", "random_cos_preserve"]
    write_csv(out / "sweep.csv", header, [
        [_fmt(p.alpha_target), _fmt(p.alpha_achieved), _fmt(p.cos_preserve), _fmt(p.cos_delete),
         _fmt(p.prob_preserve), _fmt(p.prob_delete), _fmt(p.baseline_cos_preserve)] for p in points
    ])
    for p in points:
        write_text(out / f"contour_alpha{p.alpha_target:.2f}.json", contours_to_json(p.params))
    plotting.save_figure(plotting.tradeoff_figure(x, points), out / "tradeoff.png")
    write_manifest(args, out, [args.image], {"wall_clock_s": time.perf_counter() - tic,
                                             "rows": len(points)})
    print(f"{args.image}: {len(points)} target areas -> {out / 'sweep.csv'}")
    return EXIT_OK


@dataclass
class _RunTask:
    x: np.ndarray
    recipe: BackendRecipe
    weights: LossWeights
    config: OptimConfig
    blur: BlurConfig
    start: tuple[float, float] | None = None


def _run_task(task: _RunTask):
    backend = task.recipe.build(task.x.shape)
    try:
        starts = [task.start] if task.start is not None else None
        return optimize(task.x, backend, 1, task.weights, task.config, starts=starts, blur=task.blur)
    finally:
        backend.close()


def cmd_robustness(args) -> int:
    from . import plotting

    side = int(round(math.sqrt(args.starts)))
    if args.starts < 1 or side * side != args.starts:
        raise UsageError("--starts must be a square number (1, 4, 9, ...)")
    if args.starts == 1:
        warnings.warn("robustness with a single start is an explain run; falling back to explain")
        return cmd_explain(args)
    tic = time.perf_counter()
    out = Path(args.out)
    x = _load(args, args.image)
    recipe, weights, config, blur = backend_recipe(args), loss_weights(args), optim_config(args), blur_config(args)
    starts = grid_starts(side, args.grid_extent)
    lambda_rs = _floats(args.lambda_rs)
    tasks = [_RunTask(x, recipe, weights, config, blur, s) for s in starts]
    tasks += [_RunTask(x, recipe, LossWeights(lam, weights.lambda_a_cap, weights.target_area, weights.lambda_a_fixed),
                       config, blur) for lam in lambda_rs]
    results = _map(_run_task, tasks, args.workers)
    runs, sweep = results[: len(starts)], results[len(starts):]
    iou = iou_matrix([r.mask.binarize() for r in runs])
    result = RobustnessResult(starts, runs, iou, lambda_rs, sweep)

    labels = [f"start{i}" for i in range(len(starts))]
    write_csv(out / "iou_matrix.csv", ["run"] + labels,
              [[lab] + [f"{v:.6f}" for v in row] for lab, row in zip(labels, iou)])
    rows = []
    for i, (s, r) in enumerate(zip(starts, runs)):
        p = r.params[0]
        rows.append(["start", i, _fmt(s[0]), _fmt(s[1]), _fmt(weights.lambda_r), _fmt(p.center[0]),
                     _fmt(p.center[1]), _fmt(p.r0), _fmt(spectral_penalty(p)), len(r.trace.rows),
                     r.trace.stop_reason])
        write_text(out / f"contour_start{i}.json", contours_to_json(r.params))
    for i, (lam, r) in enumerate(zip(lambda_rs, sweep)):
        p = r.params[0]
        rows.append(["lambda_r", i, "", "", _fmt(lam),
                     _fmt(p.center[0]), _fmt(p.center[1]), _fmt(p.r0), _fmt(spectral_penalty(p)),
                     len(r.trace.rows), r.trace.stop_reason])
        write_text(out / f"contour_lambda{i}.json", contours_to_json(r.params))
    write_csv(out / "runs.csv", ["kind", "index", "start_x", "start_y", "lambda_r", "center_x", "center_y",
                                 "r0", "spectral", "iterations", "stop_reason"], rows)
    plotting.save_figure(plotting.robustness_figure(x, result), out / "robustness.png")
    off = iou[~np.eye(len(starts), dtype=bool)]
    write_manifest(args, out, [args.image], {
        "wall_clock_s": time.perf_counter() - tic,
        "min_pairwise_iou": float(off.min()),
        "spectral_by_lambda_r": dict(zip(map(str, lambda_rs), result.sweep_spectral)),
        "centroids_by_lambda_r": {str(lam): list(c) for lam, c in zip(lambda_rs, result.sweep_centroids)},
    })
    print(f"{args.image}: {len(starts)} starts, min pairwise IoU {off.min():.3f} -> {out}")
    return EXIT_OK


@dataclass
class _MetricTask:
    image_id: str
    image: str
    annotation: str
    resolution: int
    recipe: BackendRecipe
    weights: LossWeights
    config: OptimConfig
    blur: BlurConfig
    faith: FaithfulnessConfig
    n_contours: int = 1


def _metric_task(task: _MetricTask):
    x = read_image(task.image, task.resolution)
    if not Path(task.annotation).exists():
        return task.image_id, None, f"missing annotation {task.annotation}"
    with Image.open(task.image) as img:
        src = (img.height, img.width)
    ann = read_annotation(task.annotation, x.shape[:2], src)
    backend = task.recipe.build(x.shape)
    try:
        res = optimize(x, backend, task.n_contours, task.weights, task.config, blur=task.blur)
        values = evaluate_all(res.mask.values, ann, x, backend, task.faith, task.blur, res.objective.x_blur)
    except UndefinedMetricError as exc:
        return task.image_id, None, f"undefined metric: {exc}"
    finally:
        backend.close()
    return task.image_id, values, None


def cmd_metrics(args) -> int:
    from . import plotting

    tic = time.perf_counter()
    out = Path(args.out)
    entries = read_dataset_manifest(args.manifest)
    resolution = args.resolution or 224
    faith = FaithfulnessConfig(args.subsets, args.subset_fraction, None, args.seed, args.faithfulness_score)
    tasks = [_MetricTask(i, img, ann, resolution, backend_recipe(args), loss_weights(args), optim_config(args),
                         blur_config(args), faith, args.contours) for i, img, ann in entries]
    results = _map(_metric_task, tasks, args.workers)
    rows, skipped = [], []
    for image_id, values, problem in results:
        if values is None:
            log.warning("skipping %s: %s", image_id, problem)
            print(f"warning: skipping {image_id}: {problem}", file=sys.stderr)
            skipped.append(image_id)
        else:
            rows.append({"image_id": image_id, **values})
    if len(skipped) * 2 > len(entries):
        raise InputError(f"{len(skipped)} of {len(entries)} images skipped; refusing to summarize")
    write_csv(out / "metrics.csv", ["image_id", *METRIC_NAMES],
              [[r["image_id"], *(_fmt(r.get(m)) for m in METRIC_NAMES)] for r in rows])
    summary = {"n_images": len(rows), "skipped": skipped, "level": args.ci_level,
               "resamples": args.resamples, "seed": args.seed, "metrics": {}}
    for m in METRIC_NAMES:
        vals = np.array([r.get(m, np.nan) for r in rows], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size >= 2:
            mean, lo, hi = bootstrap_ci(vals, args.ci_level, args.resamples, args.seed)
            summary["metrics"][m] = {"mean": mean, "lo": lo, "hi": hi, "n": int(vals.size)}
        elif vals.size == 1:
            summary["metrics"][m] = {"mean": float(vals[0]), "lo": None, "hi": None, "n": 1}
    write_json(out / "summary.json", summary)
    if rows:
        plotting.save_figure(plotting.metrics_figure(rows, [m for m in METRIC_NAMES if m in rows[0]]),
                             out / "metrics.png")
    inputs = [args.manifest] + [e[1] for e in entries] + [e[2] for e in entries if Path(e[2]).exists()]
    write_manifest(args, out, inputs, {"wall_clock_s": time.perf_counter() - tic, "skipped": skipped})
    for m, s in summary["metrics"].items():
        if s["lo"] is None:
            print(f"{m:12s} {s['mean']:.4f}")
        else:
            print(f"{m:12s} {s['mean']:.4f} ({s['lo']:.4f}, {s['hi']:.4f})")
    return EXIT_OK


def cmd_synth(args) -> int:
    """Block textures with the planted discs as annotations, plus a dataset manifest."""
    from .fixtures import block_texture, disc_mask

    if args.count < 1 or args.size < 8:
        raise UsageError("--count must be >= 1 and --size >= 8")
    out = Path(args.out)
    discs = backend_recipe(args).discs
    ann = disc_mask(args.size, args.size, discs)
    lines = []
    for i in range(args.count):
        x = block_texture(args.size, args.size, 3, args.block, seed=args.seed + i)
        write_image(out / f"image{i:03d}.png", x)
        write_image(out / f"annotation{i:03d}.png", ann[..., None].astype(float))
        lines.append(f"image{i:03d}.png annotation{i:03d}.png img{i:03d}")
    write_text(out / "dataset.txt", "\n".join(lines) + "\n")
    print(f"wrote {args.count} images -> {out / 'dataset.txt'}")
    return EXIT_OK


COMMANDS = {"explain": cmd_explain, "sweep": cmd_sweep, "robustness": cmd_robustness, "metrics": cmd_metrics,
            "synth": cmd_synth}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, InputError) as exc:
        print(f"starmask: error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"starmask: usage error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BackendError, CapabilityError) as exc:
        print(f"starmask: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (OptimizationError, DegenerateEmbeddingError) as exc:
        print(f"starmask: optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIM
    except (OSError, ValueError) as exc:
        print(f"starmask: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
