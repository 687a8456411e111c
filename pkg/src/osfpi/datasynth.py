"""Synthetic cross-view data: procedural world maps and annotated pairs.

A world map is a deterministic texture (multi-octave value noise, seeded
rectangles standing in for buildings, dark lines standing in for roads)
with an exact affine mapping between pixels and world meters. Satellite
tiles and UAV views are resampled crops of the same world, so every label
is correct by construction.

Pixel coordinate convention: integer pixel p has its center at continuous
coordinate p (the resampling convention of the underlying warp), and the
tile corner sits at -0.5. World meters are corner-anchored: a point at
pixel p of the world maps to (p + 0.5) * meters_per_pixel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .config import DataConfig, TestProtocol
from .errors import InvalidArgument, OutOfBounds

MIN_WORLD_SIZE = 1024

LABELS_HEADER = (
    "sample_id",
    "sat_path",
    "uav_path",
    "gt_x_px",
    "gt_y_px",
    "coverage_m",
    "world_x_m",
    "world_y_m",
)


@dataclass
class WorldMap:
    """Large seeded texture with a fixed meters-per-pixel scale."""

    image: np.ndarray  # (N, N, 3) uint8
    meters_per_pixel: float
    seed: int

    @property
    def size_px(self) -> int:
        return self.image.shape[0]

    @property
    def size_m(self) -> float:
        return self.size_px * self.meters_per_pixel


@dataclass
class TileGeoref:
    """Affine bookkeeping between one tile's pixels and world meters."""

    origin_px: tuple[float, float]  # world corner coordinates (x, y) of the tile corner
    scale: float  # world pixels per tile pixel
    meters_per_pixel: float  # world meters per world pixel
    size_px: int

    @property
    def coverage_m(self) -> float:
        return self.size_px * self.scale * self.meters_per_pixel

    def pixel_to_world_m(self, px: float, py: float) -> tuple[float, float]:
        ox, oy = self.origin_px
        return (
            (ox + (px + 0.5) * self.scale) * self.meters_per_pixel,
            (oy + (py + 0.5) * self.scale) * self.meters_per_pixel,
        )

    def world_m_to_pixel(self, x_m: float, y_m: float) -> tuple[float, float]:
        ox, oy = self.origin_px
        return (
            (x_m / self.meters_per_pixel - ox) / self.scale - 0.5,
            (y_m / self.meters_per_pixel - oy) / self.scale - 0.5,
        )


@dataclass
class GeoSample:
    """One annotated satellite/UAV pair."""

    sat: np.ndarray  # (S, S, 3) uint8
    uav: np.ndarray  # (U, U, 3) uint8
    gt_x: float  # UAV center in satellite-tile pixels
    gt_y: float
    coverage_m: float  # satellite ground side length
    world_x_m: float  # UAV center in world meters
    world_y_m: float

    def __post_init__(self):
        size = self.sat.shape[0]
        if not (0 <= self.gt_x < size and 0 <= self.gt_y < size):
            raise InvalidArgument(
                f"ground truth ({self.gt_x}, {self.gt_y}) outside the {size}px tile"
            )


def generate_world(seed: int, size: int = 4096, meters_per_pixel: float = 1.0) -> WorldMap:
    """Deterministic procedural world texture.

    Multi-octave value noise gives large-scale variation; rectangles and
    lines add the sharp, locally unique structure the matcher needs.
    """
    if size < MIN_WORLD_SIZE:
        raise InvalidArgument(f"world size must be >= {MIN_WORLD_SIZE}, got {size}")
    if meters_per_pixel <= 0:
        raise InvalidArgument(f"meters_per_pixel must be positive, got {meters_per_pixel}")
    rng = np.random.default_rng(seed)

    base = np.zeros((size, size, 3), np.float32)
    amplitude, total = 1.0, 0.0
    for cells in (8, 32, 128, 512):
        coarse = rng.random((cells, cells, 3), dtype=np.float32)
        base += amplitude * cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
        total += amplitude
        amplitude *= 0.5
    image = 40.0 + 175.0 * np.clip(base / total, 0.0, 1.0)

    building_count = 2 * (size // 128) ** 2
    for _ in range(building_count):
        cx, cy = rng.integers(0, size, size=2)
        half_w, half_h = rng.integers(4, 25, size=2)
        gray = float(rng.integers(60, 220))
        color = tuple(float(np.clip(gray + t, 0, 255)) for t in rng.integers(-25, 26, size=3))
        cv2.rectangle(
            image,
            (int(cx - half_w), int(cy - half_h)),
            (int(cx + half_w), int(cy + half_h)),
            color,
            thickness=-1,
        )

    road_count = size // 32
    for _ in range(road_count):
        x0, y0, x1, y1 = rng.integers(0, size, size=4)
        thickness = int(rng.integers(2, 7))
        shade = float(rng.integers(25, 70))
        cv2.line(image, (int(x0), int(y0)), (int(x1), int(y1)), (shade, shade, shade), thickness)

    return WorldMap(
        image=image.clip(0, 255).astype(np.uint8),
        meters_per_pixel=meters_per_pixel,
        seed=seed,
    )


def crop_tile(
    world: WorldMap, origin_px: tuple[float, float], span_px: float, out_px: int
) -> tuple[np.ndarray, TileGeoref]:
    """Resample a square world window to out_px pixels with exact georeferencing."""
    ox, oy = origin_px
    if span_px <= 0 or out_px < 1:
        raise InvalidArgument(f"span {span_px} px and output size {out_px} must be positive")
    if ox < 0 or oy < 0 or ox + span_px > world.size_px or oy + span_px > world.size_px:
        raise OutOfBounds(
            f"window origin ({ox:.2f}, {oy:.2f}) span {span_px:.2f} px leaves the "
            f"{world.size_px}px world"
        )
    scale = span_px / out_px
    matrix = np.array(
        [
            [scale, 0.0, ox + 0.5 * scale - 0.5],
            [0.0, scale, oy + 0.5 * scale - 0.5],
        ],
        dtype=np.float64,
    )
    tile = cv2.warpAffine(
        world.image,
        matrix,
        (out_px, out_px),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REPLICATE,
    )
    georef = TileGeoref(
        origin_px=(float(ox), float(oy)),
        scale=scale,
        meters_per_pixel=world.meters_per_pixel,
        size_px=out_px,
    )
    return tile, georef


def crop_tile_centered(
    world: WorldMap, center_x_m: float, center_y_m: float, coverage_m: float, out_px: int
) -> tuple[np.ndarray, TileGeoref]:
    """Crop a coverage_m square centered on a world position."""
    span_px = coverage_m / world.meters_per_pixel
    origin = (
        center_x_m / world.meters_per_pixel - span_px / 2,
        center_y_m / world.meters_per_pixel - span_px / 2,
    )
    return crop_tile(world, origin, span_px, out_px)


def _photometric_jitter(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gain = rng.uniform(0.8, 1.2)
    bias = rng.uniform(-20.0, 20.0)
    quarter_turns = int(rng.integers(0, 4))
    jittered = np.clip(gain * (image.astype(np.float32) - 128.0) + 128.0 + bias, 0, 255)
    return np.ascontiguousarray(np.rot90(jittered.astype(np.uint8), quarter_turns))


def sample_pair(
    world: WorldMap,
    rng: np.random.Generator,
    coverage_m: float,
    uav_footprint_m: float = 40.0,
    sat_px: int = 384,
    uav_px: int = 96,
    jitter: bool = True,
) -> GeoSample:
    """Draw one annotated pair: a satellite tile and a UAV view inside it.

    The ground truth lands uniformly in the central 80% of the tile so the
    positive window stays mostly in-bounds. Draw order is fixed (tile
    center x/y, truth x/y, then jitter) for reproducibility.
    """
    if uav_footprint_m >= coverage_m:
        raise InvalidArgument(
            f"UAV footprint {uav_footprint_m} m must be smaller than coverage {coverage_m} m"
        )
    margin_m = coverage_m / 2 + uav_footprint_m / 2
    if 2 * margin_m >= world.size_m:
        raise OutOfBounds(
            f"world of {world.size_m:.0f} m cannot hold a {coverage_m} m tile with margins"
        )
    center_x_m = rng.uniform(margin_m, world.size_m - margin_m)
    center_y_m = rng.uniform(margin_m, world.size_m - margin_m)
    sat, georef = crop_tile_centered(world, center_x_m, center_y_m, coverage_m, sat_px)

    gt_x = rng.uniform(0.1 * sat_px, 0.9 * sat_px) - 0.5
    gt_y = rng.uniform(0.1 * sat_px, 0.9 * sat_px) - 0.5
    world_x_m, world_y_m = georef.pixel_to_world_m(gt_x, gt_y)

    uav, _ = crop_tile_centered(world, world_x_m, world_y_m, uav_footprint_m, uav_px)
    if jitter:
        uav = _photometric_jitter(uav, rng)

    return GeoSample(
        sat=sat,
        uav=uav,
        gt_x=gt_x,
        gt_y=gt_y,
        coverage_m=coverage_m,
        world_x_m=world_x_m,
        world_y_m=world_y_m,
    )


def _format_float(value: float) -> str:
    return repr(float(value))


def write_split(samples: list[tuple[str, GeoSample]], split_dir: str | Path) -> Path:
    """Write PNG pairs plus labels.csv in the documented dataset layout."""
    split_dir = Path(split_dir)
    (split_dir / "sat").mkdir(parents=True, exist_ok=True)
    (split_dir / "uav").mkdir(parents=True, exist_ok=True)
    labels_path = split_dir / "labels.csv"
    with open(labels_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LABELS_HEADER)
        for sample_id, sample in samples:
            sat_path = f"sat/{sample_id}.png"
            uav_path = f"uav/{sample_id}.png"
            Image.fromarray(sample.sat, "RGB").save(split_dir / sat_path)
            Image.fromarray(sample.uav, "RGB").save(split_dir / uav_path)
            writer.writerow(
                [
                    sample_id,
                    sat_path,
                    uav_path,
                    _format_float(sample.gt_x),
                    _format_float(sample.gt_y),
                    _format_float(sample.coverage_m),
                    _format_float(sample.world_x_m),
                    _format_float(sample.world_y_m),
                ]
            )
    return labels_path


def build_test_set(
    world: WorldMap,
    protocol: TestProtocol,
    rng: np.random.Generator,
    split_dir: str | Path,
    data: DataConfig | None = None,
    sat_px: int = 384,
    uav_px: int = 96,
) -> list[tuple[str, GeoSample]]:
    """One batch of pairs per protocol coverage, written as a dataset split.

    Evaluation pairs carry no jitter so scores reflect geometry alone.
    """
    data = data or DataConfig()
    samples = []
    for index, coverage in enumerate(protocol.coverages_m):
        for j in range(protocol.samples_per_coverage):
            sample = sample_pair(
                world,
                rng,
                coverage_m=coverage,
                uav_footprint_m=data.uav_footprint_m,
                sat_px=sat_px,
                uav_px=uav_px,
                jitter=False,
            )
            samples.append((f"cov{index:02d}_{j:03d}", sample))
    write_split(samples, split_dir)
    return samples


def build_train_set(
    world: WorldMap,
    data: DataConfig,
    protocol: TestProtocol,
    rng: np.random.Generator,
    split_dir: str | Path,
    sat_px: int = 384,
    uav_px: int = 96,
) -> list[tuple[str, GeoSample]]:
    """Training pairs at fixed or protocol-spanning random coverage."""
    lo, hi = min(protocol.coverages_m), max(protocol.coverages_m)
    samples = []
    for i in range(data.train_samples):
        coverage = data.train_coverage_m
        if coverage is None:
            coverage = rng.uniform(lo, hi)
        sample = sample_pair(
            world,
            rng,
            coverage_m=coverage,
            uav_footprint_m=data.uav_footprint_m,
            sat_px=sat_px,
            uav_px=uav_px,
            jitter=data.jitter,
        )
        samples.append((f"train_{i:04d}", sample))
    write_split(samples, split_dir)
    return samples


@dataclass
class LoadedDataset:
    """A dataset split held in memory, aligned across arrays by index."""

    ids: list[str]
    uav: np.ndarray  # (N, U, U, 3) uint8
    sat: np.ndarray  # (N, S, S, 3) uint8
    gt: np.ndarray  # (N, 2) float64, (x, y) satellite-tile pixels
    coverage_m: np.ndarray  # (N,)
    world_m: np.ndarray  # (N, 2)

    def __len__(self) -> int:
        return len(self.ids)


def load_split(split_dir: str | Path) -> LoadedDataset:
    split_dir = Path(split_dir)
    labels_path = split_dir / "labels.csv"
    if not labels_path.exists():
        raise InvalidArgument(f"no labels.csv under {split_dir}")
    ids, uavs, sats, gts, coverages, worlds = [], [], [], [], [], []
    with open(labels_path, newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in LABELS_HEADER if c not in (reader.fieldnames or [])]
        if missing:
            raise InvalidArgument(f"{labels_path}: missing column(s) {missing}")
        for row in reader:
            ids.append(row["sample_id"])
            sats.append(np.asarray(Image.open(split_dir / row["sat_path"]).convert("RGB")))
            uavs.append(np.asarray(Image.open(split_dir / row["uav_path"]).convert("RGB")))
            gts.append((float(row["gt_x_px"]), float(row["gt_y_px"])))
            coverages.append(float(row["coverage_m"]))
            worlds.append((float(row["world_x_m"]), float(row["world_y_m"])))
    if not ids:
        raise InvalidArgument(f"{labels_path} lists no samples")
    return LoadedDataset(
        ids=ids,
        uav=np.stack(uavs),
        sat=np.stack(sats),
        gt=np.array(gts, dtype=np.float64),
        coverage_m=np.array(coverages, dtype=np.float64),
        world_m=np.array(worlds, dtype=np.float64),
    )


def images_to_tensor(images: np.ndarray):
    """uint8 (N, H, W, 3) to float32 (N, 3, H, W) in [0, 1]."""
    import torch

    return torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()
