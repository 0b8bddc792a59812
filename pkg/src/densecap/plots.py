"""Report figures written as PNG files (headless backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .dataset import IouHistogram  # noqa: E402
from .evaluation import EvalReport, SweepResult  # noqa: E402
from .training import LOG_COLUMNS  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ap_grid(report: EvalReport, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    im = ax.imshow(report.ap_grid, vmin=0.0, vmax=1.0, cmap="viridis", origin="lower", aspect="auto")
    ax.set_xticks(range(len(report.sim_thresholds)), [f"{s:.2f}" for s in report.sim_thresholds])
    ax.set_yticks(range(len(report.iou_thresholds)), [f"{t:.1f}" for t in report.iou_thresholds])
    ax.set_xlabel("similarity threshold")
    ax.set_ylabel("IoU threshold")
    for i, row in enumerate(report.ap_grid):
        for j, v in enumerate(row):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", color="w" if v < 0.6 else "k", fontsize=8)
    ax.set_title(f"AP grid (mAP {report.map:.4f})")
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_iou_histogram(hist: IouHistogram, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    edges = hist.edges
    frac = hist.counts / max(hist.n_regions, 1)
    ax.bar(edges[:-1], frac, width=np.diff(edges), align="edge", edgecolor="k")
    ax.axvline(0.3, color="r", linestyle="--", label=f"> 0.3: {hist.fraction_above(0.3):.1%}")
    ax.set_xlabel("max IoU with another region")
    ax.set_ylabel("fraction of regions")
    ax.legend()
    return _save(fig, path)


def plot_sweep(result: SweepResult, path: str | Path) -> Path:
    ks = sorted({r.k for r in result.rows})
    fig, axes = plt.subplots(1, len(ks), figsize=(5 * len(ks), 4), squeeze=False)
    for ax, k in zip(axes[0], ks):
        rows = [r for r in result.rows if r.k == k]
        r1s = sorted({r.nms_r1 for r in rows})
        r2s = sorted({r.nms_r2 for r in rows})
        grid = np.full((len(r1s), len(r2s)), np.nan)
        for r in rows:
            grid[r1s.index(r.nms_r1), r2s.index(r.nms_r2)] = r.map
        im = ax.imshow(grid, origin="lower", aspect="auto", cmap="magma")
        ax.set_xticks(range(len(r2s)), [f"{v:.1f}" for v in r2s])
        ax.set_yticks(range(len(r1s)), [f"{v:.1f}" for v in r1s])
        ax.set_xlabel("nms_r2")
        ax.set_ylabel("nms_r1")
        ax.set_title(f"k = {k}")
        fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_loss_curve(history: Sequence[Sequence[float]], path: str | Path, smooth: int = 50) -> Path:
    data = np.asarray(history, dtype=np.float64).reshape(-1, len(LOG_COLUMNS))
    fig, ax = plt.subplots(figsize=(7, 4))
    it = data[:, 0]
    for c in range(1, len(LOG_COLUMNS) - 1):
        y = data[:, c]
        if smooth > 1 and len(y) >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = it[smooth - 1:]
        else:
            x = it
        ax.plot(x, np.maximum(y, 1e-8), label=LOG_COLUMNS[c], linewidth=2 if LOG_COLUMNS[c] == "total" else 1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _save(fig, path)


def read_loss_log(path: str | Path) -> list[tuple[float, ...]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                rows.append(tuple(float(v) for v in line.split()))
    return rows
