"""Command line entry point: synth, train, eval, navigate, report.

Every subcommand is reproducible from a config JSON and a seed; the
resolved config is copied into the output directory. The OSFPI_THREADS
environment variable caps worker threads for deterministic timing-free
runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import cv2
import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig, load_run_config, run_config_from_dict
from .datasynth import build_test_set, build_train_set, generate_world, images_to_tensor, load_split
from .errors import (
    DimensionMismatch,
    IdMismatch,
    InvalidArgument,
    OutOfBounds,
    SplitPointError,
    TrainingDiverged,
)
from .metrics import (
    LabelRow,
    evaluate_dataset,
    read_labels_csv,
    read_predictions_csv,
    write_labels_csv,
    write_per_scale_csv,
)
from .navsim import (
    ModelLocalizer,
    OracleLocalizer,
    Trajectory,
    circular_trajectory,
    navigate,
    render_report,
)
from .reporting import heatmap_overlay
from .trainer import (
    build_model,
    overfit_smoke,
    predict_dataset,
    train,
    write_predictions_csv,
)

KNOWN_ERRORS = (
    InvalidArgument,
    DimensionMismatch,
    SplitPointError,
    OutOfBounds,
    IdMismatch,
    TrainingDiverged,
)


def _apply_thread_cap() -> None:
    value = os.environ.get("OSFPI_THREADS")
    if not value:
        return
    try:
        count = int(value)
    except ValueError:
        raise InvalidArgument(f"OSFPI_THREADS must be an integer, got {value!r}") from None
    if count < 1:
        raise InvalidArgument(f"OSFPI_THREADS must be >= 1, got {count}")
    torch.set_num_threads(count)
    cv2.setNumThreads(count)


def _resolve_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _prepare_out_dir(args) -> Path:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _split_dir(root: str | Path, preferred: str) -> Path:
    root = Path(root)
    if (root / "labels.csv").exists():
        return root
    if (root / preferred / "labels.csv").exists():
        return root / preferred
    raise InvalidArgument(f"no labels.csv under {root} or {root / preferred}")


def _model_from_checkpoint(path: str | Path, fallback: RunConfig):
    snapshot = load_checkpoint(path)
    try:
        config = run_config_from_dict(snapshot.config)
    except InvalidArgument:
        config = fallback
    model = build_model(config)
    restore_model(model, snapshot)
    model.eval()
    return model, config


def _dataset_label_rows(dataset) -> dict:
    size = int(dataset.sat.shape[1])
    return {
        sample_id: LabelRow(
            sample_id=sample_id,
            gt_x=float(dataset.gt[i, 0]),
            gt_y=float(dataset.gt[i, 1]),
            w=size,
            h=size,
            coverage_m=float(dataset.coverage_m[i]),
        )
        for i, sample_id in enumerate(dataset.ids)
    }


def cmd_synth(args) -> int:
    config = _resolve_config(args)
    out_dir = Path(args.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise InvalidArgument(f"{out_dir} is not empty; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.json")

    world = generate_world(config.seed, config.data.world_size_px, config.data.meters_per_pixel)
    rng = np.random.default_rng(config.seed)
    sat_px = config.backbone.sat_input[0]
    uav_px = config.backbone.uav_input[0]
    train_samples = build_train_set(
        world, config.data, config.protocol, rng, out_dir / "train", sat_px=sat_px, uav_px=uav_px
    )
    build_test_set(
        world, config.protocol, rng, out_dir / "test", config.data, sat_px=sat_px, uav_px=uav_px
    )
    print(f"train: {len(train_samples)} pairs")
    for coverage in config.protocol.coverages_m:
        print(f"test coverage {coverage:7.2f} m: {config.protocol.samples_per_coverage} pairs")
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    out_dir = _prepare_out_dir(args)
    if args.steps is not None:
        config.train.max_steps = args.steps

    if args.overfit:
        report = overfit_smoke(out_dir, seed=config.seed, max_steps=args.steps or 1500)
        payload = asdict(report)
        payload["checkpoint_path"] = str(report.checkpoint_path)
        payload["log_path"] = str(report.log_path)
        (out_dir / "overfit_report.json").write_text(json.dumps(payload, indent=2) + "\n")
        print(
            f"overfit: mean point error {report.mean_point_error_px:.3f} px "
            f"({report.mean_point_error_m:.3f} m), argmax-only {report.mean_argmax_error_px:.3f} px, "
            f"{report.steps} steps"
        )
        return 0

    dataset_root = args.dataset or config.paths.dataset_dir
    if not dataset_root:
        raise InvalidArgument("no dataset path; pass --dataset or set paths.dataset_dir")
    split = _split_dir(dataset_root, "train")
    dataset = load_split(split)
    config.save(out_dir / "config.json")
    model = build_model(config)
    result = train(
        model,
        dataset,
        config.train,
        seed=config.train_seed,
        out_dir=out_dir,
        run_config=config.to_dict(),
        resume_from=args.resume,
    )
    final = "n/a" if result.final_loss is None else f"{result.final_loss:.6f}"
    print(
        f"trained {result.steps_completed} step(s); final loss {final}; "
        f"checkpoint {result.checkpoint_path}"
    )
    return 0


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    out_dir = _prepare_out_dir(args)

    if args.predictions or args.labels:
        if not (args.predictions and args.labels):
            raise InvalidArgument("score-only mode needs both --predictions and --labels")
        report = evaluate_dataset(read_predictions_csv(args.predictions), read_labels_csv(args.labels))
        (out_dir / "report.json").write_text(
            json.dumps({"adjusted": report.to_dict()}, indent=2, sort_keys=True) + "\n"
        )
        write_per_scale_csv(report, out_dir / "per_scale.csv")
        config.save(out_dir / "config.json")
        print(f"mean RDS {report.mean_rds:.4f} over {report.count} samples")
        return 0

    if not args.checkpoint:
        raise InvalidArgument("pass --checkpoint with --dataset, or --predictions with --labels")
    dataset_root = args.dataset or config.paths.dataset_dir
    if not dataset_root:
        raise InvalidArgument("no dataset path; pass --dataset or set paths.dataset_dir")
    model, model_config = _model_from_checkpoint(args.checkpoint, config)
    dataset = load_split(_split_dir(dataset_root, "test"))
    model_config.save(out_dir / "config.json")

    table = predict_dataset(model, dataset, batch_size=4)
    write_predictions_csv(table, out_dir / "predictions.csv")
    labels = _dataset_label_rows(dataset)
    # score-only reruns can replay this eval from the two CSVs alone
    write_labels_csv(labels, out_dir / "eval_labels.csv")
    adjusted = evaluate_dataset(
        {sid: tuple(table.point[i]) for i, sid in enumerate(table.ids)}, labels
    )
    argmax_only = evaluate_dataset(
        {sid: tuple(table.argmax[i]) for i, sid in enumerate(table.ids)}, labels
    )
    (out_dir / "report.json").write_text(
        json.dumps(
            {"adjusted": adjusted.to_dict(), "argmax": argmax_only.to_dict()},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    write_per_scale_csv(adjusted, out_dir / "per_scale.csv")
    write_per_scale_csv(argmax_only, out_dir / "per_scale_argmax.csv")
    print(
        f"adjusted: mean RDS {adjusted.mean_rds:.4f}, mean error {adjusted.mean_error_m:.2f} m; "
        f"argmax-only: mean RDS {argmax_only.mean_rds:.4f}, "
        f"mean error {argmax_only.mean_error_m:.2f} m ({adjusted.count} samples)"
    )
    return 0


def _read_waypoints(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as handle:
        for row in csv.reader(handle):
            if not row:
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if rows:
                    raise InvalidArgument(f"{path}: malformed waypoint row {row}") from None
                # A single leading non-numeric row is a header.
    if len(rows) < 2:
        raise InvalidArgument(f"{path}: need at least 2 waypoints, found {len(rows)}")
    return np.array(rows, dtype=np.float64)


def cmd_navigate(args) -> int:
    config = _resolve_config(args)
    out_dir = _prepare_out_dir(args)
    world_seed = args.world_seed if args.world_seed is not None else config.seed
    world = generate_world(world_seed, config.data.world_size_px, config.data.meters_per_pixel)

    if args.trajectory_file:
        trajectory = Trajectory(_read_waypoints(args.trajectory_file), step_m=config.nav.step_m)
    else:
        center = (world.size_m / 2, world.size_m / 2)
        radius = min(world.size_m / 6, 400.0)
        frames = max(8, round(2 * np.pi * radius / config.nav.step_m))
        trajectory = circular_trajectory(center, radius, config.nav.step_m, frames=frames)

    if args.oracle:
        localizer = OracleLocalizer()
    elif args.checkpoint:
        model, config = _model_from_checkpoint(args.checkpoint, config)
        localizer = ModelLocalizer(model)
    else:
        raise InvalidArgument("pass --oracle or --checkpoint to choose a localizer")

    state = navigate(
        world,
        trajectory,
        localizer,
        config.nav,
        uav_footprint_m=config.data.uav_footprint_m,
        sat_px=config.backbone.sat_input[0],
        uav_px=config.backbone.uav_input[0],
    )
    render_report(state, world, out_dir)
    config.save(out_dir / "config.json")
    flag = " (diverged on some frames)" if state.any_diverged else ""
    print(f"{len(state.frames)} frames; mean error {state.mean_error_m:.3f} m{flag}")
    return 0


def _count_data_rows(labels_path: Path) -> int:
    with open(labels_path, newline="") as handle:
        return max(0, sum(1 for _ in csv.reader(handle)) - 1)


def cmd_report(args) -> int:
    config = _resolve_config(args)
    out_dir = _prepare_out_dir(args)
    dataset_root = args.dataset or config.paths.dataset_dir
    if not dataset_root:
        raise InvalidArgument("no dataset path; pass --dataset or set paths.dataset_dir")
    split = _split_dir(dataset_root, "test")
    if _count_data_rows(split / "labels.csv") == 0:
        print("warning: dataset lists no samples; nothing to report")
        return 0
    if not args.checkpoint:
        raise InvalidArgument("pass --checkpoint to render model predictions")
    model, model_config = _model_from_checkpoint(args.checkpoint, config)
    dataset = load_split(split)
    model_config.save(out_dir / "config.json")

    limit = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    rendered = 0
    rows = []
    for lo in range(0, limit, 4):
        hi = min(lo + 4, limit)
        uav = images_to_tensor(dataset.uav[lo:hi])
        sat = images_to_tensor(dataset.sat[lo:hi])
        output = model.predict(uav, sat)
        for j in range(hi - lo):
            index = lo + j
            sample_id = dataset.ids[index]
            argmax = output.argmax[j].numpy()
            point = output.point[j].numpy()
            heatmap_overlay(
                dataset.sat[index],
                output.heatmap[j].numpy(),
                true_xy=tuple(dataset.gt[index]),
                argmax_xy=tuple(argmax),
                point_xy=tuple(point),
                path=out_dir / f"{sample_id}_overlay.png",
                title=sample_id,
            )
            rows.append(
                [
                    sample_id,
                    int(argmax[0]),
                    int(argmax[1]),
                    repr(float(point[0])),
                    repr(float(point[1])),
                    repr(float(output.peak[j])),
                ]
            )
            rendered += 1
    with open(out_dir / "predictions.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("sample_id", "argmax_x", "argmax_y", "point_x", "point_y", "peak_value"))
        writer.writerows(rows)
    print(f"wrote {rendered} overlay image(s) to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="osfpi",
        description="Cross-view UAV-to-satellite localization: synthetic data, "
        "training, evaluation, navigation simulation, and visual reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run config JSON; defaults apply when omitted")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out-dir", required=True, help="output directory")

    synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(synth)
    synth.add_argument("--force", action="store_true", help="overwrite a non-empty out dir")
    synth.set_defaults(func=cmd_synth)

    trainp = sub.add_parser("train", help="train a model on a dataset split")
    common(trainp)
    trainp.add_argument("--dataset", help="dataset root or split directory")
    trainp.add_argument("--resume", help="checkpoint to resume from")
    trainp.add_argument("--steps", type=int, help="cap the number of optimizer steps")
    trainp.add_argument("--overfit", action="store_true", help="run the 16-pair overfit smoke test")
    trainp.set_defaults(func=cmd_train)

    evalp = sub.add_parser("eval", help="score a checkpoint or a predictions CSV")
    common(evalp)
    evalp.add_argument("--checkpoint", help="model checkpoint to evaluate")
    evalp.add_argument("--dataset", help="dataset root or split directory")
    evalp.add_argument("--predictions", help="predictions CSV (score-only mode)")
    evalp.add_argument("--labels", help="labels CSV (score-only mode)")
    evalp.set_defaults(func=cmd_eval)

    nav = sub.add_parser("navigate", help="run the closed-loop navigation simulator")
    common(nav)
    nav.add_argument("--world-seed", type=int, help="world seed (defaults to the config seed)")
    nav.add_argument("--trajectory-file", help="CSV of waypoints in meters (x,y per row)")
    nav.add_argument("--checkpoint", help="model checkpoint to localize with")
    nav.add_argument("--oracle", action="store_true", help="use the exact-truth localizer")
    nav.set_defaults(func=cmd_navigate)

    report = sub.add_parser("report", help="render heatmap overlays for a dataset")
    common(report)
    report.add_argument("--checkpoint", help="model checkpoint to render")
    report.add_argument("--dataset", help="dataset root or split directory")
    report.add_argument("--limit", type=int, help="render at most this many samples")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
