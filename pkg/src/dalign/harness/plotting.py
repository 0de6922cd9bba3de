"""SVG figures for reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

import numpy as np  # noqa: E402

from ..pointcloud import CLASS_NAMES, BoxSet, PointFrame  # noqa: E402

plt.rcParams["svg.hashsalt"] = "dalign"  # stable element ids across runs
_COLORS = ("tab:blue", "tab:orange", "tab:green", "tab:red", "tab:purple")


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def pr_curves(curves: dict, path: str | Path, threshold: str = "2") -> Path:
    """Precision/recall per class at one distance threshold."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for (name, t), (recall, precision) in sorted(curves.items()):
        if t == threshold and len(recall):
            ax.plot(recall, precision, label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"precision-recall @ {threshold} m")
    ax.legend(loc="lower left")
    return _save(fig, Path(path))


def _corners(x, y, length, width, yaw) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[1, 1], [1, -1], [-1, -1], [-1, 1]]) * [length / 2, width / 2]
    return local @ np.array([[c, s], [-s, c]]) + [x, y]


def bev_view(frame: PointFrame, truth: BoxSet, predictions, path: str | Path,
             extent: tuple[float, float, float, float] | None = None) -> Path:
    """Top-down points with ground-truth (solid) and predicted (dashed) boxes."""
    fig, ax = plt.subplots(figsize=(6, 6))
    pts = frame.points
    ax.scatter(pts[:, 0], pts[:, 1], s=0.3, c=pts[:, 4], cmap="viridis_r", linewidths=0)
    for p, cls in zip(truth.params, truth.class_id):
        ax.add_patch(Polygon(_corners(p[0], p[1], p[3], p[4], p[6]), fill=False, lw=1.2,
                             ec=_COLORS[int(cls) % len(_COLORS)]))
    for d in predictions:
        ax.add_patch(Polygon(_corners(d.x, d.y, d.length, d.width, d.yaw), fill=False, lw=0.8, ls="--",
                             ec=_COLORS[d.class_id % len(_COLORS)]))
    if extent is not None:
        ax.set_xlim(extent[0], extent[1])
        ax.set_ylim(extent[2], extent[3])
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    handles = [plt.Line2D([], [], color=_COLORS[k], label=n) for k, n in enumerate(CLASS_NAMES)]
    ax.legend(handles=handles, loc="upper right", fontsize=7)
    return _save(fig, Path(path))


def ablation_bars(labels: list[str], values: list[float], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(labels) + 1), 3.5))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_ylabel("mAP")
    for k, v in enumerate(values):
        ax.text(k, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    return _save(fig, Path(path))


def loss_curves(histories: dict[str, list[float]], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, losses in histories.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, marker="o", ms=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.legend()
    return _save(fig, Path(path))
