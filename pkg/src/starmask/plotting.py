"""Matplotlib figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fileio import atomic_path  # noqa: E402
from .geometry import ContourParams, radius_at  # noqa: E402

INITIAL_COLOR = "tab:red"
FINAL_COLOR = "tab:blue"
DPI = 100
LINE_PX = 2.0


def _line_width(px: float = LINE_PX, dpi: int = DPI) -> float:
    return px * 72.0 / dpi


def contour_polyline(params: ContourParams, height: int, width: int, n: int = 720):
    """Closed contour outline in pixel coordinates (column, row)."""
    theta = np.linspace(0.0, 2.0 * np.pi, n + 1)
    r = radius_at(params, theta)
    x = params.center[0] + r * np.cos(theta)
    y = params.center[1] + r * np.sin(theta)
    return (x + 1.0) * width / 2.0 - 0.5, (y + 1.0) * height / 2.0 - 0.5


def _show(ax, x: np.ndarray):
    if x.shape[2] == 1:
        ax.imshow(x[..., 0], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    else:
        ax.imshow(np.clip(x, 0, 1), interpolation="nearest")
    ax.set_axis_off()


def _draw(ax, params_list: Sequence[ContourParams], h: int, w: int, color: str, **kw):
    for p in params_list:
        cx, cy = contour_polyline(p, h, w)
        ax.plot(cx, cy, color=color, lw=_line_width(), **kw)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)


def save_figure(fig, path) -> None:
    fmt = str(path).rsplit(".", 1)[-1]
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format=fmt, dpi=DPI, metadata={"Software": None} if fmt == "png" else None)
    plt.close(fig)


def overlay_figure(x: np.ndarray, initial: Sequence[ContourParams], final: Sequence[ContourParams]):
    h, w = x.shape[:2]
    scale = max(1.0, 400.0 / max(h, w))
    fig, ax = plt.subplots(figsize=(w * scale / DPI, h * scale / DPI))
    fig.subplots_adjust(0, 0, 1, 1)
    _show(ax, x)
    _draw(ax, initial, h, w, INITIAL_COLOR)
    _draw(ax, final, h, w, FINAL_COLOR)
    return fig


def panels_figure(x, mask, x_p, x_d):
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    for ax, img, title in zip(axes, [x, mask[..., None], x_p, x_d], ["input", "mask", "preserve", "delete"]):
        _show(ax, img)
        ax.set_title(title)
    fig.tight_layout()
    return fig


def convergence_figure(trace):
    it = [r.iter for r in trace.rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, trace.totals(), label="loss (scheduled tau)")
    sel = trace.selection_losses()
    if np.all(np.isfinite(sel)):
        ax.plot(it, sel, label="loss (final tau)")
    ax.axvline(trace.best_iter, color="k", ls=":", lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    return fig


def tradeoff_figure(x, points):
    """Nested contours per target area (left) and similarity curves (right)."""
    h, w = x.shape[:2]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4))
    _show(left, x)
    colors = plt.cm.viridis(np.linspace(0, 1, len(points)))
    for pt, c in zip(points, colors):
        _draw(left, pt.params, h, w, c)
    alphas = [pt.alpha_target for pt in points]
    right.plot(alphas, [pt.cos_preserve for pt in points], "-o", label="preserve")
    right.plot(alphas, [pt.cos_delete for pt in points], "--o", label="delete")
    right.plot(alphas, [pt.baseline_cos_preserve for pt in points], ":", label="random circles")
    if points and points[0].prob_preserve is not None:
        right.plot(alphas, [pt.prob_preserve for pt in points], "-s", label="prob. preserve")
        right.plot(alphas, [pt.prob_delete for pt in points], "--s", label="prob. delete")
    right.set_xlabel("target area fraction")
    right.set_ylabel("cosine similarity to original")
    right.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return fig


def robustness_figure(x, result):
    h, w = x.shape[:2]
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 4.5))
    _show(left, x)
    for run in result.runs:
        _draw(left, run.initial, h, w, INITIAL_COLOR, alpha=0.6)
        _draw(left, run.params, h, w, FINAL_COLOR, alpha=0.6)
    left.set_title("start centers")
    _show(right, x)
    colors = plt.cm.plasma(np.linspace(0, 0.85, len(result.sweep_runs)))
    for lam, run, c in zip(result.lambda_rs, result.sweep_runs, colors):
        _draw(right, run.params, h, w, c, label=f"lambda_r={lam:g}")
    right.legend(frameon=False, fontsize=8, loc="lower left")
    right.set_title("spectral weight")
    fig.tight_layout()
    return fig


def metrics_figure(rows: Sequence[dict], names: Sequence[str]):
    fig, axes = plt.subplots(1, len(names), figsize=(2.2 * len(names), 3))
    axes = np.atleast_1d(axes)
    for ax, name in zip(axes, names):
        vals = np.array([r[name] for r in rows], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            ax.boxplot(vals)
            ax.plot(np.ones_like(vals), vals, ".", alpha=0.5)
        ax.set_title(name)
        ax.set_xticks([])
    fig.tight_layout()
    return fig
