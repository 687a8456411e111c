"""Versioned checkpoint archive for model weights and optimizer state.

One compressed npz holds everything a resume needs: parameters under
``param/<name>``, first/second moment tensors under ``opt/<name>/...``,
and a JSON metadata blob (step counter, resolved config, batch-sampler
rng state) under ``meta``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgument

FORMAT_VERSION = "osfpi-ckpt-v1"


@dataclass
class Checkpoint:
    version: str
    step: int
    config: dict
    params: dict  # name -> np.ndarray
    opt: dict  # name -> {"exp_avg": array, "exp_avg_sq": array, "step": array}
    sampler_state: dict | None


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    step: int,
    config: dict,
    optimizer: torch.optim.Optimizer | None = None,
    sampler_state: dict | None = None,
) -> Path:
    path = Path(path)
    arrays = {"version": np.array(FORMAT_VERSION)}
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for param in group["params"]:
                state = optimizer.state.get(param)
                if not state:
                    continue
                name = names[id(param)]
                arrays[f"opt/{name}/exp_avg"] = state["exp_avg"].detach().cpu().numpy()
                arrays[f"opt/{name}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
                arrays[f"opt/{name}/step"] = np.asarray(float(state["step"]))
    meta = {"step": int(step), "config": config, "sampler_state": sampler_state}
    arrays["meta"] = np.array(json.dumps(meta))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        np.savez_compressed(handle, **arrays)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as archive:
        version = str(archive["version"])
        if version != FORMAT_VERSION:
            raise InvalidArgument(
                f"unsupported checkpoint format {version!r}, expected {FORMAT_VERSION!r}"
            )
        meta = json.loads(str(archive["meta"]))
        params, opt = {}, {}
        for key in archive.files:
            if key.startswith("param/"):
                params[key[len("param/") :]] = archive[key]
            elif key.startswith("opt/"):
                name, field = key[len("opt/") :].rsplit("/", 1)
                opt.setdefault(name, {})[field] = archive[key]
    return Checkpoint(
        version=version,
        step=meta["step"],
        config=meta["config"],
        params=params,
        opt=opt,
        sampler_state=meta.get("sampler_state"),
    )


def restore_model(model: torch.nn.Module, checkpoint: Checkpoint) -> None:
    """Load weights by name; any mismatch in names or shapes is an error."""
    expected = set(model.state_dict())
    found = set(checkpoint.params)
    if expected != found:
        raise InvalidArgument(
            f"checkpoint parameters do not match the model; "
            f"missing {sorted(expected - found)}, unexpected {sorted(found - expected)}"
        )
    state = {name: torch.from_numpy(array) for name, array in checkpoint.params.items()}
    model.load_state_dict(state, strict=True)


def restore_optimizer(
    optimizer: torch.optim.Optimizer, model: torch.nn.Module, checkpoint: Checkpoint
) -> None:
    """Re-attach saved moment estimates to the freshly built optimizer."""
    by_name = dict(model.named_parameters())
    for name, fields in checkpoint.opt.items():
        if name not in by_name:
            raise InvalidArgument(f"optimizer state for unknown parameter {name!r}")
        param = by_name[name]
        optimizer.state[param] = {
            "step": torch.tensor(float(fields["step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(fields["exp_avg"]).to(param.dtype),
            "exp_avg_sq": torch.from_numpy(fields["exp_avg_sq"]).to(param.dtype),
        }
