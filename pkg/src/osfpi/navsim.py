"""Closed-loop navigation over a world map.

Each frame renders the UAV view at the vehicle's true position, crops a
search tile around the current believed position, localizes, and recenters
the next search on the prediction. Because every frame re-anchors on the
satellite map, per-frame errors do not accumulate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import NavConfig
from .datasynth import WorldMap, crop_tile_centered, images_to_tensor
from .errors import InvalidArgument, OutOfBounds
from .fusion import GeoLocalizer

NAV_CSV_HEADER = ("frame", "true_x_m", "true_y_m", "pred_x_m", "pred_y_m", "error_m")


@dataclass
class Trajectory:
    """Ordered true positions of the vehicle, in world meters."""

    waypoints: np.ndarray  # (N, 2)
    step_m: float = 20.0

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 2:
            raise InvalidArgument(
                f"waypoints must be (N, 2), got shape {self.waypoints.shape}"
            )
        if len(self.waypoints) < 2:
            raise InvalidArgument("a trajectory needs at least 2 waypoints")

    def max_spacing(self) -> float:
        deltas = np.diff(self.waypoints, axis=0)
        return float(np.hypot(deltas[:, 0], deltas[:, 1]).max())


def resample_polyline(points: np.ndarray, step_m: float) -> Trajectory:
    """Walk a polyline at fixed arc-length spacing."""
    points = np.asarray(points, dtype=np.float64)
    if step_m <= 0:
        raise InvalidArgument(f"step_m must be positive, got {step_m}")
    if len(points) < 2:
        raise InvalidArgument("need at least 2 points to resample")
    segments = np.diff(points, axis=0)
    lengths = np.hypot(segments[:, 0], segments[:, 1])
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cumulative[-1]
    if total <= 0:
        raise InvalidArgument("polyline has zero length")
    distances = np.arange(0.0, total, step_m)
    xs = np.interp(distances, cumulative, points[:, 0])
    ys = np.interp(distances, cumulative, points[:, 1])
    waypoints = np.stack([xs, ys], axis=1)
    if not np.allclose(waypoints[-1], points[-1]):
        waypoints = np.vstack([waypoints, points[-1]])
    return Trajectory(waypoints=waypoints, step_m=step_m)


def circular_trajectory(
    center_m: tuple[float, float], radius_m: float, step_m: float = 20.0, frames: int = 50
) -> Trajectory:
    """A closed loop; convenient default when no waypoint file is given."""
    if frames < 2:
        raise InvalidArgument("need at least 2 frames")
    angles = np.linspace(0.0, 2 * math.pi, frames, endpoint=False)
    waypoints = np.stack(
        [
            center_m[0] + radius_m * np.cos(angles),
            center_m[1] + radius_m * np.sin(angles),
        ],
        axis=1,
    )
    return Trajectory(waypoints=waypoints, step_m=step_m)


class OracleLocalizer:
    """Returns the exact true pixel; isolates the loop from model error."""

    def locate(self, uav: np.ndarray, sat: np.ndarray, true_px: tuple[float, float]):
        return true_px


class BiasedLocalizer:
    """Oracle plus a constant pixel bias; models a systematic offset."""

    def __init__(self, bias_px: tuple[float, float]):
        self.bias_px = bias_px

    def locate(self, uav: np.ndarray, sat: np.ndarray, true_px: tuple[float, float]):
        return true_px[0] + self.bias_px[0], true_px[1] + self.bias_px[1]


class ModelLocalizer:
    """Runs the trained model; the true pixel argument is ignored."""

    def __init__(self, model: GeoLocalizer):
        self.model = model

    def locate(self, uav: np.ndarray, sat: np.ndarray, true_px: tuple[float, float]):
        uav_t = images_to_tensor(uav[None])
        sat_t = images_to_tensor(sat[None])
        output = self.model.predict(uav_t, sat_t)
        point = output.point[0]
        return float(point[0]), float(point[1])


@dataclass
class FrameRecord:
    frame: int
    true_m: tuple[float, float]
    pred_m: tuple[float, float]
    error_m: float
    diverged: bool


@dataclass
class NavState:
    """Loop outcome: per-frame log plus the final believed position."""

    search_coverage_m: float
    frames: list[FrameRecord] = field(default_factory=list)
    believed_position_m: tuple[float, float] = (0.0, 0.0)

    @property
    def error_log(self) -> list[float]:
        return [record.error_m for record in self.frames]

    @property
    def mean_error_m(self) -> float:
        if not self.frames:
            raise InvalidArgument("no frames processed")
        return sum(self.error_log) / len(self.frames)

    @property
    def any_diverged(self) -> bool:
        return any(record.diverged for record in self.frames)


def navigate(
    world: WorldMap,
    trajectory: Trajectory,
    localizer,
    cfg: NavConfig | None = None,
    uav_footprint_m: float = 40.0,
    sat_px: int = 384,
    uav_px: int = 96,
    initial_estimate_m: tuple[float, float] | None = None,
) -> NavState:
    """Crop, localize, recenter for every frame of the trajectory.

    A frame whose error exceeds half the search coverage is flagged as
    diverged but the loop keeps running; a search tile that leaves the
    world aborts with the frame index.
    """
    cfg = cfg or NavConfig()
    if trajectory.max_spacing() > cfg.search_coverage_m / 2:
        raise InvalidArgument(
            f"waypoint spacing {trajectory.max_spacing():.1f} m exceeds half the "
            f"search coverage {cfg.search_coverage_m} m; the target could leave the next tile"
        )
    believed = (
        tuple(map(float, trajectory.waypoints[0]))
        if initial_estimate_m is None
        else (float(initial_estimate_m[0]), float(initial_estimate_m[1]))
    )
    state = NavState(search_coverage_m=cfg.search_coverage_m, believed_position_m=believed)
    with torch.no_grad():
        for index, (true_x, true_y) in enumerate(trajectory.waypoints):
            try:
                uav, _ = crop_tile_centered(world, true_x, true_y, uav_footprint_m, uav_px)
                sat, georef = crop_tile_centered(
                    world, believed[0], believed[1], cfg.search_coverage_m, sat_px
                )
            except OutOfBounds as exc:
                raise OutOfBounds(f"frame {index}: {exc}") from None
            true_px = georef.world_m_to_pixel(true_x, true_y)
            pred_px = localizer.locate(uav, sat, true_px)
            pred_m = georef.pixel_to_world_m(pred_px[0], pred_px[1])
            error_m = math.hypot(pred_m[0] - true_x, pred_m[1] - true_y)
            state.frames.append(
                FrameRecord(
                    frame=index,
                    true_m=(float(true_x), float(true_y)),
                    pred_m=(float(pred_m[0]), float(pred_m[1])),
                    error_m=error_m,
                    diverged=error_m > cfg.search_coverage_m / 2,
                )
            )
            believed = pred_m
    state.believed_position_m = believed
    return state


def write_nav_csv(state: NavState, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(NAV_CSV_HEADER)
        for record in state.frames:
            writer.writerow(
                [
                    record.frame,
                    repr(record.true_m[0]),
                    repr(record.true_m[1]),
                    repr(record.pred_m[0]),
                    repr(record.pred_m[1]),
                    repr(record.error_m),
                ]
            )
    return path


def render_report(state: NavState, world: WorldMap, out_dir: str | Path) -> tuple[Path, Path]:
    """Per-frame CSV plus a two-track overlay image of the run."""
    from . import reporting

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_nav_csv(state, out_dir / "navigation.csv")
    overlay_path = reporting.trajectory_overlay(world, state, out_dir / "trajectory_overlay.png")
    return csv_path, overlay_path
