"""Parameter checkpoints with a versioned JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..errors import ArgumentError, ContractError
from ..graph import ClusterAssignment
from .calf import CALF, CALFConfig, ClusterCALF
from .lstm import LSTMConfig, LSTMForecaster
from .ntgat import NTGAT, NTGATConfig

FORMAT_VERSION = 1


def _config_dict(model: nn.Module) -> dict:
    if isinstance(model, ClusterCALF):
        first = model.models["0"]
        return {"calf": first.cfg.to_dict(), "k": model.assignment.k,
                "labels": [int(x) for x in model.assignment.labels]}
    return model.cfg.to_dict()


def architecture_of(model: nn.Module) -> str:
    for cls, name in ((ClusterCALF, "cluster-calf"), (CALF, "calf"), (NTGAT, "ntgat"),
                      (LSTMForecaster, "lstm")):
        if isinstance(model, cls):
            return name
    raise ArgumentError(f"unsupported model type {type(model).__name__}")


def save_checkpoint(model: nn.Module, directory: str | Path, seed: int) -> list[Path]:
    """Write ``params.pt`` and ``manifest.json``; returns the written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": architecture_of(model),
        "config": _config_dict(model),
        "seed": seed,
        "param_shapes": {k: list(v.shape) for k, v in state.items()},
    }
    params = directory / "params.pt"
    torch.save(state, params)
    man = directory / "manifest.json"
    man.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [params, man]


def load_checkpoint(directory: str | Path) -> tuple[nn.Module, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    arch, cfg = manifest["architecture"], manifest["config"]
    if arch == "lstm":
        model = LSTMForecaster(LSTMConfig(**cfg))
    elif arch == "ntgat":
        model = NTGAT(NTGATConfig.from_dict(cfg))
    elif arch == "calf":
        model = CALF(CALFConfig(**cfg))
    elif arch == "cluster-calf":
        assignment = ClusterAssignment(cfg["k"], np.asarray(cfg["labels"]))
        calf_cfg = CALFConfig(**cfg["calf"])
        model = ClusterCALF(assignment, {c: CALF(calf_cfg) for c in range(assignment.k)})
    else:
        raise ContractError(f"unknown architecture {arch!r} in manifest")
    state = torch.load(directory / "params.pt", weights_only=True)
    shapes = {k: list(v.shape) for k, v in state.items()}
    if shapes != manifest["param_shapes"]:
        raise ContractError("parameter shapes disagree with the manifest")
    model.load_state_dict(state)
    model.eval()
    return model, manifest
