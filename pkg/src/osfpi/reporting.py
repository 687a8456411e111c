"""File-based matplotlib renderings of localization results."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

TRUE_COLOR = "red"
ARGMAX_COLOR = "blue"
ADJUSTED_COLOR = "green"


def heatmap_overlay(
    sat: np.ndarray,
    heatmap: np.ndarray,
    true_xy: tuple[float, float],
    argmax_xy: tuple[float, float],
    point_xy: tuple[float, float],
    path: str | Path,
    title: str | None = None,
) -> Path:
    """Satellite tile with the score map and the three markers.

    Red is the true position, blue the raw heatmap peak, green the
    offset-adjusted point.
    """
    path = Path(path)
    scores = np.asarray(heatmap, dtype=np.float64)
    spread = scores.max() - scores.min()
    normalized = (scores - scores.min()) / (spread if spread > 0 else 1.0)

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(sat)
    ax.imshow(normalized, cmap="magma", alpha=0.45, extent=(-0.5, sat.shape[1] - 0.5, sat.shape[0] - 0.5, -0.5))
    ax.plot(*true_xy, marker="o", color=TRUE_COLOR, markersize=10, linestyle="none", label="true")
    ax.plot(*argmax_xy, marker="x", color=ARGMAX_COLOR, markersize=10, linestyle="none", label="peak")
    ax.plot(
        *point_xy,
        marker="o",
        markerfacecolor="none",
        markeredgecolor=ADJUSTED_COLOR,
        markersize=14,
        linestyle="none",
        label="adjusted",
    )
    ax.legend(loc="lower right", framealpha=0.8)
    if title:
        ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def trajectory_overlay(world, state, path: str | Path) -> Path:
    """True (red) and predicted (blue) tracks over the world map, in meters."""
    path = Path(path)
    true_track = np.array([record.true_m for record in state.frames])
    pred_track = np.array([record.pred_m for record in state.frames])

    fig, ax = plt.subplots(figsize=(8, 8))
    extent = (0.0, world.size_m, world.size_m, 0.0)
    ax.imshow(world.image, extent=extent)
    ax.plot(true_track[:, 0], true_track[:, 1], color=TRUE_COLOR, marker=".", label="true")
    ax.plot(
        pred_track[:, 0],
        pred_track[:, 1],
        color=ARGMAX_COLOR,
        marker=".",
        linestyle="--",
        label="predicted",
    )
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def loss_curve(steps: list[int], losses: list[float], path: str | Path) -> Path:
    """Training loss against step index."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, color="tab:purple")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
