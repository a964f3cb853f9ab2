"""Figure rendering for reports and sweeps (SVG files, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .change_detect import ChangeReport

# muted four-color palette, one color per metric / cloud class
PALETTE = {
    "R_new": "#1f77b4",
    "P_new": "#d62728",
    "R_rm": "#2ca02c",
    "P_rm": "#9467bd",
}

plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3
plt.rcParams["figure.autolayout"] = True


def _metric_series(rows: list[dict], key: str) -> np.ndarray:
    vals = []
    for row in rows:
        v = row.get(key, "na")
        vals.append(np.nan if v in ("na", None, "") else float(v))
    return np.asarray(vals)


def plot_sweep(rows: list[dict], parameter: str, path) -> Path:
    """Line plot of the four metrics against the swept parameter."""
    x = np.asarray([float(r[parameter]) for r in rows])
    order = np.argsort(x)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for key, color in PALETTE.items():
        y = _metric_series(rows, key)[order]
        ax.plot(x[order], y, marker="o", color=color, label=key, lw=1.6)
    ax.set_xlabel(parameter)
    ax.set_ylabel("score")
    ax.set_ylim(-0.02, 1.05)
    ax.legend(loc="lower left", ncol=2, framealpha=0.9)
    ax.set_title(f"change-detection metrics vs {parameter}")
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def plot_change_report(report: ChangeReport, path, trajectory=None) -> Path:
    """Top-down overview: prior in gray, new in red, removed in blue."""
    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    prior = report.observed_prior.points
    if len(prior):
        ax.scatter(prior[:, 0], prior[:, 1], s=1.0, c="#c8c8c8",
                   label="observed prior", rasterized=True)
    new = report.new_points.points
    if len(new):
        ax.scatter(new[:, 0], new[:, 1], s=3.0, c="#d62728", label="new")
    removed = report.removed_points.points
    if len(removed):
        ax.scatter(removed[:, 0], removed[:, 1], s=3.0, c="#1f77b4", label="removed")
    if trajectory is not None and len(trajectory):
        t = np.asarray([p.t for p in trajectory])
        ax.plot(t[:, 0], t[:, 1], c="k", lw=0.8, label="trajectory")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("detected changes (top view)")
    path = Path(path)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
