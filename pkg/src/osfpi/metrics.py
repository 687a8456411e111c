"""Localization quality metrics and dataset-level aggregation.

Two headline numbers: the relative distance score (an exponential of the
normalized pixel deviation) and meter-level accuracy (the percentage of
samples localized within a metric threshold).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import IdMismatch, InvalidArgument

MA_THRESHOLDS_M = (1.0, 3.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0)

PREDICTIONS_COLUMNS = ("sample_id", "point_x", "point_y")
LABELS_COLUMNS = ("sample_id", "gt_x", "gt_y", "w", "h", "coverage_m")


def rds(dx: float, dy: float, w: float, h: float, k: float = 10.0) -> float:
    """exp(-k * sqrt(((dx/w)^2 + (dy/h)^2) / 2)); 1 at zero deviation."""
    if w <= 0 or h <= 0:
        raise InvalidArgument(f"image size must be positive, got w={w}, h={h}")
    return math.exp(-k * math.sqrt(((dx / w) ** 2 + (dy / h) ** 2) / 2))


def pixel_to_meters(dx: float, dy: float, width_px: float, coverage_m: float) -> float:
    """Euclidean pixel deviation scaled by the tile's meters-per-pixel."""
    if width_px <= 0 or coverage_m <= 0:
        raise InvalidArgument(
            f"width and coverage must be positive, got {width_px} px, {coverage_m} m"
        )
    return math.hypot(dx, dy) * coverage_m / width_px


def ma_curve(errors_m: list[float], thresholds: tuple[float, ...] = MA_THRESHOLDS_M) -> dict:
    """Percentage of samples with error strictly below each threshold."""
    if len(errors_m) == 0:
        raise InvalidArgument("cannot compute accuracy over an empty error list")
    total = len(errors_m)
    return {t: 100.0 * sum(1 for e in errors_m if e < t) / total for t in thresholds}


@dataclass
class EvalRecord:
    """One scored sample: absolute pixel deviation plus tile geometry."""

    sample_id: str
    dx: float
    dy: float
    w: int
    h: int
    coverage_m: float

    def __post_init__(self):
        if self.dx < 0 or self.dy < 0:
            raise InvalidArgument(f"deviations must be nonnegative, got ({self.dx}, {self.dy})")

    @property
    def error_m(self) -> float:
        return pixel_to_meters(self.dx, self.dy, self.w, self.coverage_m)

    @property
    def rds(self) -> float:
        return rds(self.dx, self.dy, self.w, self.h)


@dataclass
class LabelRow:
    sample_id: str
    gt_x: float
    gt_y: float
    w: int
    h: int
    coverage_m: float


@dataclass
class ScaleMetrics:
    count: int
    mean_rds: float
    mean_error_m: float
    ma: dict


@dataclass
class MetricsReport:
    """Aggregate scores, overall and broken down per coverage scale."""

    count: int
    mean_rds: float
    mean_error_m: float
    ma: dict
    per_scale: dict  # coverage_m -> ScaleMetrics

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_rds": self.mean_rds,
            "mean_error_m": self.mean_error_m,
            "ma": {str(t): v for t, v in self.ma.items()},
            "per_scale": {
                str(cov): {
                    "count": s.count,
                    "mean_rds": s.mean_rds,
                    "mean_error_m": s.mean_error_m,
                    "ma": {str(t): v for t, v in s.ma.items()},
                }
                for cov, s in self.per_scale.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _aggregate(records: list[EvalRecord]) -> tuple[float, float, dict]:
    errors = [r.error_m for r in records]
    mean_rds = sum(r.rds for r in records) / len(records)
    return mean_rds, sum(errors) / len(errors), ma_curve(errors)


def evaluate_records(records: list[EvalRecord]) -> MetricsReport:
    """Order-invariant aggregation with a per-coverage breakdown."""
    if not records:
        raise InvalidArgument("cannot evaluate an empty record list")
    mean_rds, mean_error, ma = _aggregate(records)
    per_scale = {}
    for coverage in sorted({r.coverage_m for r in records}):
        group = [r for r in records if r.coverage_m == coverage]
        g_rds, g_err, g_ma = _aggregate(group)
        per_scale[coverage] = ScaleMetrics(
            count=len(group), mean_rds=g_rds, mean_error_m=g_err, ma=g_ma
        )
    return MetricsReport(
        count=len(records),
        mean_rds=mean_rds,
        mean_error_m=mean_error,
        ma=ma,
        per_scale=per_scale,
    )


def evaluate_dataset(predictions: dict, labels: dict) -> MetricsReport:
    """Score a mapping sample_id -> (x, y) against sample_id -> LabelRow."""
    missing_labels = sorted(set(predictions) - set(labels))
    missing_predictions = sorted(set(labels) - set(predictions))
    if missing_labels or missing_predictions:
        raise IdMismatch(
            f"predictions without labels: {missing_labels}; "
            f"labels without predictions: {missing_predictions}"
        )
    records = []
    for sample_id in sorted(labels):
        label = labels[sample_id]
        px, py = predictions[sample_id]
        records.append(
            EvalRecord(
                sample_id=sample_id,
                dx=abs(px - label.gt_x),
                dy=abs(py - label.gt_y),
                w=label.w,
                h=label.h,
                coverage_m=label.coverage_m,
            )
        )
    return evaluate_records(records)


def _require_columns(fieldnames, required, path):
    missing = [c for c in required if c not in (fieldnames or [])]
    if missing:
        raise InvalidArgument(f"{path}: missing column(s) {missing}")


def read_predictions_csv(path: str | Path) -> dict:
    """sample_id -> (point_x, point_y) from a predictions CSV."""
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        _require_columns(reader.fieldnames, PREDICTIONS_COLUMNS, path)
        return {
            row["sample_id"]: (float(row["point_x"]), float(row["point_y"])) for row in reader
        }


def read_labels_csv(path: str | Path) -> dict:
    """sample_id -> LabelRow from an evaluation labels CSV."""
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        _require_columns(reader.fieldnames, LABELS_COLUMNS, path)
        return {
            row["sample_id"]: LabelRow(
                sample_id=row["sample_id"],
                gt_x=float(row["gt_x"]),
                gt_y=float(row["gt_y"]),
                w=int(row["w"]),
                h=int(row["h"]),
                coverage_m=float(row["coverage_m"]),
            )
            for row in reader
        }


def write_labels_csv(labels: dict, path: str | Path) -> Path:
    """Write sample_id -> LabelRow in the evaluation labels schema."""
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LABELS_COLUMNS)
        for sample_id in sorted(labels):
            label = labels[sample_id]
            writer.writerow(
                [
                    label.sample_id,
                    repr(float(label.gt_x)),
                    repr(float(label.gt_y)),
                    label.w,
                    label.h,
                    repr(float(label.coverage_m)),
                ]
            )
    return path


def write_per_scale_csv(report: MetricsReport, path: str | Path) -> None:
    """Flat per-coverage table: one row per scale plus an overall row."""
    thresholds = list(report.ma)
    header = ["coverage_m", "count", "mean_rds", "mean_error_m"]
    header += [f"ma_{t:g}m_pct" for t in thresholds]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for coverage, scale in report.per_scale.items():
            row = [repr(float(coverage)), scale.count, repr(scale.mean_rds), repr(scale.mean_error_m)]
            row += [repr(scale.ma[t]) for t in thresholds]
            writer.writerow(row)
        overall = ["overall", report.count, repr(report.mean_rds), repr(report.mean_error_m)]
        overall += [repr(report.ma[t]) for t in thresholds]
        writer.writerow(overall)
