"""Training loop: cosine schedule, split learning rates, resumable steps.

Batches are drawn per step from a dedicated numpy generator whose state is
checkpointed, so a resumed run replays the exact batch sequence of an
uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .config import BackboneConfig, DataConfig, FusionConfig, RunConfig, TrainConfig
from .datasynth import LoadedDataset, build_train_set, generate_world, images_to_tensor, load_split
from .errors import InvalidArgument, TrainingDiverged
from .fusion import GeoLocalizer
from .losses import SampleLabel, batch_loss

LOG_HEADER = ("step", "lr_backbone", "lr_head", "loss_cls", "loss_off", "loss_total", "wall_ms")
GRAD_CLIP_NORM = 1.0


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> tuple[float, float]:
    """Backbone and head learning rates at a given step of the schedule."""
    if step < 0 or step > total_steps:
        raise InvalidArgument(f"step {step} outside [0, {total_steps}]")
    if total_steps <= 0:
        backbone = cfg.base_lr
    else:
        progress = step / total_steps
        backbone = cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (
            1 + math.cos(math.pi * progress)
        )
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        backbone *= (step + 1) / cfg.warmup_steps
    return backbone, cfg.head_lr_ratio * backbone


def parameter_groups(model: torch.nn.Module, cfg: TrainConfig) -> list[dict]:
    """Four groups: backbone/head crossed with decay/no-decay.

    Weight decay applies only to matrix-shaped parameters; norms and biases
    are exempt. ``lr_scale`` marks the head multiplier for the step loop.
    """
    buckets = {}
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        part = "backbone" if name.startswith("backbone.") else "head"
        decayed = param.ndim >= 2
        buckets.setdefault((part, decayed), []).append(param)
    groups = []
    for (part, decayed), params in sorted(buckets.items()):
        groups.append(
            {
                "params": params,
                "weight_decay": cfg.weight_decay if decayed else 0.0,
                "lr_scale": cfg.head_lr_ratio if part == "head" else 1.0,
                "name": f"{part}_{'decay' if decayed else 'nodecay'}",
            }
        )
    return groups


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(parameter_groups(model, cfg), lr=cfg.base_lr, betas=(0.9, 0.999))


def build_model(config: RunConfig) -> GeoLocalizer:
    """Seeded model construction so two builds share exact initial weights."""
    torch.manual_seed(config.seed)
    return GeoLocalizer(
        backbone_config=config.backbone,
        fusion_config=config.fusion,
        offset_clamp=(config.train.positive_window - 1) / 2,
    )


def total_train_steps(cfg: TrainConfig, dataset_size: int) -> int:
    if dataset_size < 1:
        raise InvalidArgument("dataset is empty")
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * math.ceil(dataset_size / cfg.batch_size)


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps_completed: int
    final_loss: float | None


def _batch_labels(dataset: LoadedDataset, indices: np.ndarray, cfg: TrainConfig):
    return [
        SampleLabel(
            gt_x=float(dataset.gt[i, 0]),
            gt_y=float(dataset.gt[i, 1]),
            window=cfg.positive_window,
            topk=cfg.positive_topk,
        )
        for i in indices
    ]


def train(
    model: GeoLocalizer,
    dataset: LoadedDataset,
    cfg: TrainConfig,
    seed: int,
    out_dir: str | Path,
    run_config: dict | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the step loop and leave a checkpoint plus a CSV log in out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total_steps = total_train_steps(cfg, len(dataset))
    optimizer = build_optimizer(model, cfg)
    sampler = np.random.default_rng(seed)
    start_step = 0
    if resume_from is not None:
        snapshot = load_checkpoint(resume_from)
        restore_model(model, snapshot)
        restore_optimizer(optimizer, model, snapshot)
        start_step = snapshot.step
        if snapshot.sampler_state is None:
            raise InvalidArgument(f"{resume_from} carries no sampler state to resume from")
        sampler.bit_generator.state = snapshot.sampler_state
        if start_step > total_steps:
            raise InvalidArgument(
                f"checkpoint step {start_step} exceeds the schedule of {total_steps} steps"
            )

    log_path = out_dir / "train_log.csv"
    meta_config = run_config if run_config is not None else {"train": cfg.__dict__.copy()}
    replace = cfg.batch_size > len(dataset)
    final_loss = None

    append = resume_from is not None and log_path.exists()
    with open(log_path, "a" if append else "w", newline="") as handle:
        log = csv.writer(handle)
        if not append:
            log.writerow(LOG_HEADER)
        model.train()
        for step in range(start_step, total_steps):
            started = time.perf_counter()
            lr_backbone, lr_head = cosine_lr(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr_backbone * group["lr_scale"]

            indices = sampler.choice(len(dataset), size=cfg.batch_size, replace=replace)
            uav = images_to_tensor(dataset.uav[indices])
            sat = images_to_tensor(dataset.sat[indices])
            labels = _batch_labels(dataset, indices, cfg)

            heatmap, offsets = model(uav, sat)
            breakdown = batch_loss(heatmap, offsets, labels)
            total = breakdown.total
            if not torch.isfinite(total):
                batch_ids = [dataset.ids[i] for i in indices]
                dump = {"step": step, "sample_ids": batch_ids, "loss": str(total.item())}
                (out_dir / "divergence.json").write_text(json.dumps(dump, indent=2) + "\n")
                raise TrainingDiverged(
                    f"non-finite loss at step {step} on samples {batch_ids}"
                )

            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), GRAD_CLIP_NORM)
            optimizer.step()

            final_loss = float(total.detach())
            wall_ms = (time.perf_counter() - started) * 1000.0
            log.writerow(
                [
                    step,
                    repr(lr_backbone),
                    repr(lr_head),
                    repr(float(breakdown.classification.detach())),
                    repr(float(breakdown.offset.detach())),
                    repr(final_loss),
                    repr(wall_ms),
                ]
            )
            handle.flush()

            if cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_step{step + 1:06d}.npz",
                    model,
                    step=step + 1,
                    config=meta_config,
                    optimizer=optimizer,
                    sampler_state=sampler.bit_generator.state,
                )

    checkpoint_path = save_checkpoint(
        out_dir / "checkpoint.npz",
        model,
        step=total_steps,
        config=meta_config,
        optimizer=optimizer,
        sampler_state=sampler.bit_generator.state,
    )
    return TrainResult(
        checkpoint_path=checkpoint_path,
        log_path=log_path,
        steps_completed=total_steps - start_step,
        final_loss=final_loss,
    )


@dataclass
class PredictionTable:
    """Per-sample model outputs for a whole split, aligned with its ids."""

    ids: list[str]
    argmax: np.ndarray  # (N, 2) integer (x, y)
    point: np.ndarray  # (N, 2) refined (x, y)
    peak: np.ndarray  # (N,)

    def point_errors_px(self, gt: np.ndarray) -> np.ndarray:
        return np.hypot(*(self.point - gt).T)

    def argmax_errors_px(self, gt: np.ndarray) -> np.ndarray:
        return np.hypot(*(self.argmax - gt).T)


@torch.no_grad()
def predict_dataset(
    model: GeoLocalizer, dataset: LoadedDataset, batch_size: int = 8
) -> PredictionTable:
    was_training = model.training
    model.eval()
    argmax, point, peak = [], [], []
    try:
        for lo in range(0, len(dataset), batch_size):
            hi = min(lo + batch_size, len(dataset))
            uav = images_to_tensor(dataset.uav[lo:hi])
            sat = images_to_tensor(dataset.sat[lo:hi])
            output = model.predict(uav, sat)
            argmax.append(output.argmax.numpy())
            point.append(output.point.numpy())
            peak.append(output.peak.numpy())
    finally:
        model.train(was_training)
    return PredictionTable(
        ids=list(dataset.ids),
        argmax=np.concatenate(argmax).astype(np.float64),
        point=np.concatenate(point).astype(np.float64),
        peak=np.concatenate(peak).astype(np.float64),
    )


PREDICTIONS_HEADER = ("sample_id", "argmax_x", "argmax_y", "point_x", "point_y", "peak_value")


def write_predictions_csv(table: PredictionTable, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(PREDICTIONS_HEADER)
        for i, sample_id in enumerate(table.ids):
            writer.writerow(
                [
                    sample_id,
                    int(table.argmax[i, 0]),
                    int(table.argmax[i, 1]),
                    repr(float(table.point[i, 0])),
                    repr(float(table.point[i, 1])),
                    repr(float(table.peak[i])),
                ]
            )
    return path


def overfit_run_config(seed: int = 0, max_steps: int = 1500, base_lr: float = 1e-3) -> RunConfig:
    """Miniature end-to-end setup small enough to overfit on a CPU."""
    return RunConfig(
        seed=seed,
        backbone=BackboneConfig(
            patch_size=4,
            stage_channels=[16, 32, 64],
            stage_depths=[1, 1, 2],
            stage_heads=[1, 2, 4],
            sra_ratios=[4, 2, 1],
            mlp_ratios=[4, 4, 4],
            uav_input=(32, 32),
            sat_input=(128, 128),
        ),
        fusion=FusionConfig(fpn_channels=16, atrous_rates=[2, 4, 8], heatmap_size=128),
        train=TrainConfig(
            batch_size=8,
            base_lr=base_lr,
            final_lr=base_lr / 100,
            epochs=1,
            max_steps=max_steps,
        ),
        data=DataConfig(
            world_size_px=1024,
            meters_per_pixel=1.0,
            uav_footprint_m=32.0,
            train_samples=16,
            train_coverage_m=128.0,
            jitter=False,
        ),
    )


@dataclass
class OverfitReport:
    mean_point_error_px: float
    mean_argmax_error_px: float
    mean_point_error_m: float
    steps: int
    checkpoint_path: Path
    log_path: Path


def overfit_smoke(
    workdir: str | Path, seed: int = 0, max_steps: int = 1500, base_lr: float = 1e-3
) -> OverfitReport:
    """Train on 16 fixed pairs and report the final training-set point error."""
    workdir = Path(workdir)
    config = overfit_run_config(seed=seed, max_steps=max_steps, base_lr=base_lr)
    world = generate_world(config.seed, config.data.world_size_px, config.data.meters_per_pixel)
    rng = np.random.default_rng(config.seed)
    split_dir = workdir / "dataset" / "train"
    build_train_set(
        world,
        config.data,
        config.protocol,
        rng,
        split_dir,
        sat_px=config.backbone.sat_input[0],
        uav_px=config.backbone.uav_input[0],
    )
    dataset = load_split(split_dir)
    model = build_model(config)
    result = train(
        model,
        dataset,
        config.train,
        seed=config.train_seed,
        out_dir=workdir / "run",
        run_config=config.to_dict(),
    )
    table = predict_dataset(model, dataset)
    point_px = table.point_errors_px(dataset.gt)
    argmax_px = table.argmax_errors_px(dataset.gt)
    meters = point_px * dataset.coverage_m / config.backbone.sat_input[0]
    return OverfitReport(
        mean_point_error_px=float(point_px.mean()),
        mean_argmax_error_px=float(argmax_px.mean()),
        mean_point_error_m=float(meters.mean()),
        steps=result.steps_completed,
        checkpoint_path=result.checkpoint_path,
        log_path=result.log_path,
    )
