"""Configuration dataclasses and strict JSON round-tripping.

Every run is fully described by a single JSON document (``RunConfig``).
Loading is strict: unknown keys are rejected so ablation flags stay auditable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import InvalidArgument

CONFIG_VERSION = 1


def _linspace(lo: float, hi: float, n: int) -> list[float]:
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


@dataclass
class BackboneConfig:
    """Geometry of the shared one-stream pyramid encoder.

    Three stages; each per-stage list must have length 3. Channel counts
    must be divisible by the head counts, and both input sizes must be
    divisible by ``patch_size * 2**(stages - 1)`` so the stage grids stay
    integral.
    """

    patch_size: int = 4
    stage_channels: list[int] = field(default_factory=lambda: [64, 128, 320])
    stage_depths: list[int] = field(default_factory=lambda: [3, 4, 6])
    stage_heads: list[int] = field(default_factory=lambda: [1, 2, 5])
    sra_ratios: list[int] = field(default_factory=lambda: [8, 4, 2])
    mlp_ratios: list[int] = field(default_factory=lambda: [8, 8, 4])
    uav_input: tuple[int, int] = (96, 96)
    sat_input: tuple[int, int] = (384, 384)

    def __post_init__(self):
        self.uav_input = tuple(self.uav_input)
        self.sat_input = tuple(self.sat_input)
        lists = {
            "stage_channels": self.stage_channels,
            "stage_depths": self.stage_depths,
            "stage_heads": self.stage_heads,
            "sra_ratios": self.sra_ratios,
            "mlp_ratios": self.mlp_ratios,
        }
        for name, values in lists.items():
            if len(values) != 3:
                raise InvalidArgument(f"{name} must have exactly 3 entries, got {len(values)}")
        for c, h in zip(self.stage_channels, self.stage_heads):
            if c % h != 0:
                raise InvalidArgument(f"stage channels {c} not divisible by head count {h}")
        divisor = self.patch_size * 2 ** (self.num_stages - 1)
        for name, hw in (("uav_input", self.uav_input), ("sat_input", self.sat_input)):
            if hw[0] % divisor or hw[1] % divisor:
                raise InvalidArgument(f"{name} {hw} must be divisible by {divisor}")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)


@dataclass
class FusionConfig:
    """Satellite-branch pyramid fusion and prediction head geometry."""

    fpn_channels: int = 64
    atrous_rates: list[int] = field(default_factory=lambda: [12, 24, 32])
    corr_groups: int | None = None  # None resolves to fpn_channels (depthwise)
    heatmap_size: int = 384

    def __post_init__(self):
        rates = self.atrous_rates
        if not rates or any(r <= 0 for r in rates):
            raise InvalidArgument(f"atrous_rates must be positive, got {rates}")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise InvalidArgument(f"atrous_rates must be strictly increasing, got {rates}")
        if self.fpn_channels % self.groups != 0:
            raise InvalidArgument(
                f"fpn_channels {self.fpn_channels} not divisible by corr_groups {self.groups}"
            )

    @property
    def groups(self) -> int:
        return self.fpn_channels if self.corr_groups is None else self.corr_groups


@dataclass
class TrainConfig:
    """Optimizer, schedule, and objective knobs.

    ``positive_window`` and ``positive_topk`` are the positive-sample
    ablation knobs of the offset branch; ``head_lr_ratio`` scales the
    learning rate of everything outside the backbone.
    """

    batch_size: int = 16
    base_lr: float = 3e-4
    final_lr: float = 5e-6
    head_lr_ratio: float = 1.5
    epochs: int = 10
    seed: int | None = None  # None falls back to RunConfig.seed
    weight_decay: float = 0.05
    warmup_steps: int = 0
    max_steps: int | None = None  # optional hard cap on optimizer steps
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    positive_window: int = 33
    positive_topk: int = 300

    def __post_init__(self):
        if self.final_lr >= self.base_lr:
            raise InvalidArgument(f"final_lr {self.final_lr} must be < base_lr {self.base_lr}")
        if self.head_lr_ratio <= 0:
            raise InvalidArgument(f"head_lr_ratio must be > 0, got {self.head_lr_ratio}")
        if self.positive_window < 1 or self.positive_window % 2 == 0:
            raise InvalidArgument(f"positive_window must be odd, got {self.positive_window}")
        if self.positive_topk < 1:
            raise InvalidArgument(f"positive_topk must be >= 1, got {self.positive_topk}")


@dataclass
class TestProtocol:
    """Multi-scale evaluation protocol: 12 coverages spanning 180 to 463 m."""

    coverages_m: list[float] = field(default_factory=lambda: _linspace(180.0, 463.0, 12))
    samples_per_coverage: int = 4

    def __post_init__(self):
        cov = self.coverages_m
        if len(cov) != 12:
            raise InvalidArgument(f"coverages_m must list exactly 12 scales, got {len(cov)}")
        if min(cov) != 180.0 or max(cov) != 463.0:
            raise InvalidArgument(
                f"coverages_m must span [180, 463] m, got [{min(cov)}, {max(cov)}]"
            )
        if self.samples_per_coverage < 1:
            raise InvalidArgument("samples_per_coverage must be >= 1")


@dataclass
class DataConfig:
    """Synthetic world and training-split generation knobs."""

    world_size_px: int = 4096
    meters_per_pixel: float = 1.0
    uav_footprint_m: float = 40.0
    train_samples: int = 64
    train_coverage_m: float | None = None  # None samples uniformly over the protocol range
    jitter: bool = True

    def __post_init__(self):
        if self.meters_per_pixel <= 0:
            raise InvalidArgument("meters_per_pixel must be positive")
        if self.uav_footprint_m <= 0:
            raise InvalidArgument("uav_footprint_m must be positive")


@dataclass
class NavConfig:
    """Closed-loop navigation simulator knobs."""

    search_coverage_m: float = 384.0
    step_m: float = 20.0

    def __post_init__(self):
        if self.search_coverage_m <= 0:
            raise InvalidArgument("search_coverage_m must be positive")


@dataclass
class PathsConfig:
    dataset_dir: str | None = None
    out_dir: str | None = None


@dataclass
class RunConfig:
    """Composite configuration for every CLI subcommand."""

    config_version: int = CONFIG_VERSION
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: TestProtocol = field(default_factory=TestProtocol)
    data: DataConfig = field(default_factory=DataConfig)
    nav: NavConfig = field(default_factory=NavConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise InvalidArgument(
                f"config_version {self.config_version!r} unsupported, expected {CONFIG_VERSION}"
            )

    @property
    def train_seed(self) -> int:
        return self.seed if self.train.seed is None else self.train.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _build(cls, payload: dict, context: str):
    if not isinstance(payload, dict):
        raise InvalidArgument(f"{context}: expected an object, got {type(payload).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise InvalidArgument(f"{context}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in payload.items():
        sub = _SECTION_TYPES.get((cls, name))
        kwargs[name] = _build(sub, value, f"{context}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except InvalidArgument as exc:
        raise InvalidArgument(f"{context}: {exc}") from None


_SECTION_TYPES = {
    (RunConfig, "backbone"): BackboneConfig,
    (RunConfig, "fusion"): FusionConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "protocol"): TestProtocol,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "nav"): NavConfig,
    (RunConfig, "paths"): PathsConfig,
}


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate a config JSON file; rejects unknown keys."""
    payload = json.loads(Path(path).read_text())
    return _build(RunConfig, payload, context="config")


def run_config_from_dict(payload: dict) -> RunConfig:
    return _build(RunConfig, payload, context="config")
