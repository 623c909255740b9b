"""Pipeline configuration: one YAML/JSON file, validated strictly up front."""

from __future__ import annotations

import hashlib
import itertools
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import SplitSpec
from .errors import ArgumentError, ConfigurationError
from .training import ARCHS, GridSpec, TrainConfig


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthSpec(Strict):
    n_links: int = Field(32, ge=2)
    n_hours: int = Field(2160, ge=336)
    n_clusters: int = Field(4, ge=1)
    noise: float = Field(0.08, ge=0)


class DataSource(Strict):
    """Either a CSV ``path`` (with optional graph sidecar) or a ``synth`` spec."""

    path: str | None = None
    graph: str | None = None
    unit: str = "Mbps"
    synth: SynthSpec | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synth is None):
            raise ValueError("exactly one of 'path' or 'synth' must be given")
        if self.synth is not None and self.graph is not None:
            raise ValueError("'graph' only applies to a 'path' source")
        return self


class SplitModel(Strict):
    train: float = 0.7
    val: float = 0.15
    test: float = 0.15

    @model_validator(mode="after")
    def _valid(self):
        self.spec()
        return self

    def spec(self) -> SplitSpec:
        try:
            return SplitSpec(self.train, self.val, self.test)
        except ArgumentError as exc:
            raise ValueError(str(exc)) from None


class WindowModel(Strict):
    input_length: int = Field(24, ge=1)
    horizon: int = Field(1, ge=1)


class LSTMParams(Strict):
    hidden_units: int = Field(64, ge=1)
    dropout_rate: float = Field(0.1, ge=0, lt=1)


class NTGATParams(Strict):
    n_heads: int = Field(8, ge=1)
    lift_dim: int = Field(8, ge=1)
    gat_out_dim: int = Field(16, ge=1)
    lstm1_hidden: int = Field(64, ge=1)
    lstm2_hidden: int = Field(128, ge=1)
    dropout_rate: float = Field(0.0, ge=0, lt=1)
    negative_slope: float = Field(0.2, ge=0)
    gat_activation: Literal["elu", "relu", "tanh", "identity"] = "elu"
    residual: bool = True
    hops: int = Field(2, ge=1)
    adjacency_mode: Literal["directed", "symmetric"] = "symmetric"
    self_loops: bool = True

    @model_validator(mode="after")
    def _heads(self):
        if self.gat_out_dim % self.n_heads:
            raise ValueError("gat_out_dim must be divisible by n_heads")
        return self


class CALFParams(Strict):
    d_model: int = Field(64, ge=1)
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(128, ge=1)
    vocab_size: int = Field(512, ge=1)
    n_principal: int = Field(32, ge=1)
    lora_rank: int = Field(4, ge=1)
    lora_alpha: float = Field(8.0, gt=0)
    lora_targets: tuple[Literal["q", "k", "v", "o"], ...] = ("q", "v")
    lambda_feature: float = Field(0.01, ge=0)
    lambda_output: float = Field(1.0, ge=0)
    dropout_rate: float = Field(0.1, ge=0, lt=1)
    backbone_seed: int = 0
    vocab_path: str | None = None

    @model_validator(mode="after")
    def _dims(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_principal > min(self.vocab_size, self.d_model):
            raise ValueError("n_principal must not exceed min(vocab_size, d_model)")
        return self


PARAM_MODELS: dict[str, type[Strict]] = {
    "lstm": LSTMParams,
    "ntgat": NTGATParams,
    "calf": CALFParams,
    "cluster-calf": CALFParams,
}


class ModelsModel(Strict):
    lstm: LSTMParams = LSTMParams()
    ntgat: NTGATParams = NTGATParams()
    calf: CALFParams = CALFParams()


class GridModel(Strict):
    horizons: list[int] = Field(default_factory=lambda: [1, 3, 6, 12, 24], min_length=1)
    sequence_lengths: list[int] = Field(default_factory=lambda: [24, 168, 336], min_length=1)
    params: dict[Literal["lstm", "ntgat", "calf", "cluster-calf"], dict[str, list]] = Field(default_factory=dict)


class TrainModel(Strict):
    max_epochs: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    huber_delta: float = Field(1.0, gt=0)
    early_stop_patience: int = Field(5, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    train_stride: int = Field(1, ge=1)
    n_jobs: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _patience(self):
        if self.early_stop_patience >= self.max_epochs:
            raise ValueError("early_stop_patience must be smaller than max_epochs")
        return self

    def config(self, seed: int) -> TrainConfig:
        d = self.model_dump(exclude={"n_jobs"})
        return TrainConfig(seed=seed, **d)


class ClusterModel(Strict):
    method: Literal["spearman", "pearson"] = "spearman"
    k: int = Field(4, ge=1)  # used by train/evaluate
    k_list: list[int] = Field(default_factory=lambda: [2, 4, 8], min_length=1)  # used by cluster/sweep

    @model_validator(mode="after")
    def _positive(self):
        if any(k < 1 for k in self.k_list):
            raise ValueError("cluster counts must be positive")
        return self


class PipelineConfig(Strict):
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataSource
    split: SplitModel = SplitModel()
    window: WindowModel = WindowModel()
    grid: GridModel = GridModel()
    archs: list[Literal["lstm", "ntgat", "calf", "cluster-calf"]] = Field(
        default_factory=lambda: list(ARCHS), min_length=1
    )
    models: ModelsModel = ModelsModel()
    train: TrainModel = TrainModel()
    cluster: ClusterModel = ClusterModel()

    @model_validator(mode="after")
    def _grid_params(self):
        # every grid combination must form a valid parameter set for its arch
        for arch, grid in self.grid.params.items():
            fixed = self.fixed_params(arch)
            names = sorted(grid)
            for combo in itertools.product(*(grid[n] for n in names)):
                point = dict(zip(names, combo))
                if arch == "cluster-calf":
                    point.pop("k", None)
                try:
                    PARAM_MODELS[arch](**{**fixed, **point})
                except ValidationError as exc:
                    err = exc.errors()[0]
                    where = ".".join(str(p) for p in err["loc"])
                    raise ValueError(f"grid.params.{arch}.{where}: {err['msg']}") from None
        return self

    def fixed_params(self, arch: str) -> dict:
        key = "calf" if arch == "cluster-calf" else arch
        return getattr(self.models, key).model_dump(mode="json")

    def grid_params(self, arch: str) -> dict[str, list]:
        """Grid lists for ``arch``; Cluster-CALF sweeps ``k`` over ``cluster.k_list``."""
        params = {k: list(v) for k, v in self.grid.params.get(arch, {}).items()}
        if arch == "cluster-calf":
            params.setdefault("k", list(self.cluster.k_list))
        return params

    def grid_spec(self, arch: str) -> GridSpec:
        return GridSpec(tuple(self.grid.horizons), tuple(self.grid.sequence_lengths), self.grid_params(arch))

    def train_config(self) -> TrainConfig:
        return self.train.config(self.seed)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def format_validation_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Read and validate a config file; ``overrides`` replace top-level keys."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: not valid YAML/JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return PipelineConfig(**raw)
    except ValidationError as exc:
        raise ConfigurationError(format_validation_error(exc)) from None
