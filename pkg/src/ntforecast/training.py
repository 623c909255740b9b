"""Model fitting: mini-batch optimisation with early stopping, horizon x
sequence-length grid search, and per-cluster CALF training."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import (
    NetworkMTS,
    RowRange,
    ScalerState,
    WindowBatch,
    fit_scaler,
    inverse_transform,
    make_windows,
    n_windows,
    require_training_rows,
    transform,
)
from .errors import ArgumentError, ConfigurationError, LeakageError, TrainingError
from .evaluation import MetricReport, per_series_report
from .graph import ClusterAssignment, LineDigraph, cluster_series, correlation_matrix, k_hop_adjacency
from .losses import huber_loss
from .models import (
    CALF,
    NTGAT,
    CALFConfig,
    ClusterCALF,
    ForecastOutput,
    LSTMConfig,
    LSTMForecaster,
    NTGATConfig,
    calf_losses,
)

log = logging.getLogger(__name__)

Arch = Literal["lstm", "ntgat", "calf", "cluster-calf"]
ARCHS = ("lstm", "ntgat", "calf", "cluster-calf")
MIN_TRAIN_WINDOWS = 32

__all__ = [
    "ARCHS",
    "EarlyStopper",
    "GridResult",
    "GridSpec",
    "RunLog",
    "TrainConfig",
    "build_model",
    "grid_search",
    "huber_loss",
    "predict",
    "train_cluster_calf",
    "train_model",
]


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    huber_delta: float = 1.0
    early_stop_patience: int = 5
    seed: int = 0
    optimizer: Literal["adam", "sgd"] = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    train_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        for name in ("max_epochs", "batch_size", "early_stop_patience", "train_stride"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.huber_delta <= 0:
            raise ArgumentError("learning_rate and huber_delta must be positive")
        if self.early_stop_patience >= self.max_epochs:
            raise ArgumentError("early_stop_patience must be smaller than max_epochs")
        if self.optimizer not in ("adam", "sgd"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class RunLog:
    """Per-epoch losses of one training run (or of several, for Cluster-CALF)."""

    config_fingerprint: str
    records: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    final_metrics: dict = field(default_factory=dict)
    parts: dict[int, RunLog] = field(default_factory=dict)

    def add(self, epoch: int, train_loss: float, val_loss: float, wall_s: float) -> None:
        self.records.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "wall_s": wall_s}
        )

    @property
    def val_losses(self) -> list[float]:
        return [r["val_loss"] for r in self.records]

    @property
    def train_losses(self) -> list[float]:
        return [r["train_loss"] for r in self.records]

    @property
    def n_epochs(self) -> int:
        if self.parts:
            return max(p.n_epochs for p in self.parts.values())
        return len(self.records)

    def to_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            for rec in self.iter_records():
                fh.write(json.dumps({"config": self.config_fingerprint, **rec}) + "\n")

    def iter_records(self):
        if self.parts:
            for c, part in sorted(self.parts.items()):
                for rec in part.records:
                    yield {"cluster": c, **rec}
        else:
            yield from self.records


def fingerprint(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


class EarlyStopper:
    """Tracks the best validation loss and a snapshot of the matching state."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: int | None = None
        self.best_state: dict | None = None
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float, model: nn.Module) -> bool:
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = copy.deepcopy(model.state_dict())
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# Models


def build_model(arch: str, cfg) -> nn.Module:
    if arch == "lstm":
        return LSTMForecaster(cfg)
    if arch == "ntgat":
        return NTGAT(cfg)
    if arch == "calf":
        return CALF(cfg)
    raise ArgumentError(f"unknown architecture {arch!r}")


def _forward(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    if isinstance(model, (CALF, ClusterCALF)):
        return model.predict(x)
    return model(x)


def batch_loss(arch: str, model: nn.Module, cfg, x: torch.Tensor, y: torch.Tensor, delta: float) -> torch.Tensor:
    """Full training objective for one mini-batch."""
    if arch == "calf":
        out = model(x, mode="train")
        return calf_losses(out.predictions, out.text_predictions, out.hidden, out.text_hidden, y,
                           cfg.lambda_feature, cfg.lambda_output, delta).total
    return huber_loss(model(x), y, delta)


def _validation_loss(model: nn.Module, batch: WindowBatch, delta: float, batch_size: int) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, batch.S, batch_size):
            x = torch.as_tensor(batch.inputs[start : start + batch_size], dtype=torch.float32)
            y = torch.as_tensor(batch.targets[start : start + batch_size], dtype=torch.float32)
            total += float(huber_loss(_forward(model, x), y, delta)) * x.shape[0]
            count += x.shape[0]
    return total / count


def _optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


def train_model(arch: str, model_cfg, train_cfg: TrainConfig, train: WindowBatch,
                val: WindowBatch) -> tuple[nn.Module, RunLog]:
    """Fit one model on scaled windows; returns the best-validation-epoch model."""
    if not (train.scaled and val.scaled):
        raise ArgumentError("train_model expects scaled windows")
    if arch not in ("lstm", "ntgat", "calf"):
        raise ArgumentError(f"train_model does not train {arch!r}; see train_cluster_calf")
    torch.manual_seed(train_cfg.seed)
    model = build_model(arch, model_cfg)
    opt = _optimizer(model, train_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    run_log = RunLog(fingerprint({"arch": arch, "model": model_cfg.to_dict(), "train": train_cfg.to_dict()}))
    stopper = EarlyStopper(train_cfg.early_stop_patience)
    idx_all = np.arange(0, train.S, train_cfg.train_stride)
    x_all = torch.as_tensor(train.inputs, dtype=torch.float32)
    y_all = torch.as_tensor(train.targets, dtype=torch.float32)
    t0 = time.perf_counter()
    for epoch in range(1, train_cfg.max_epochs + 1):
        model.train()
        order = idx_all[rng.permutation(len(idx_all))]
        total = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            sel = torch.as_tensor(order[start : start + train_cfg.batch_size])
            loss = batch_loss(arch, model, model_cfg, x_all[sel], y_all[sel], train_cfg.huber_delta)
            if not torch.isfinite(loss):
                run_log.add(epoch, math.nan, math.nan, time.perf_counter() - t0)
                raise TrainingError(f"non-finite training loss at epoch {epoch}", run_log)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(sel)
        train_loss = total / len(order)
        val_loss = _validation_loss(model, val, train_cfg.huber_delta, 256)
        run_log.add(epoch, train_loss, val_loss, time.perf_counter() - t0)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}", run_log)
        if stopper.update(epoch, val_loss, model):
            break
    model.load_state_dict(stopper.best_state)
    model.eval()
    run_log.best_epoch = stopper.best_epoch
    return model, run_log


def predict(model: nn.Module, batch: WindowBatch, scaler: ScalerState | None,
            batch_size: int = 256) -> ForecastOutput:
    """Forecasts for every window in original units."""
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, batch.S, batch_size):
            x = torch.as_tensor(batch.inputs[start : start + batch_size], dtype=torch.float32)
            outs.append(_forward(model, x).double().numpy())
    pred = np.concatenate(outs, axis=0)
    if batch.scaled:
        if scaler is None:
            raise ArgumentError("scaled inputs need the scaler to invert predictions")
        pred = inverse_transform(_subset_scaler(scaler, batch.link_ids), pred)
    return ForecastOutput(pred, batch.link_ids)


def _subset_scaler(scaler: ScalerState, link_ids: Sequence[str]) -> ScalerState:
    if tuple(link_ids) == scaler.link_ids:
        return scaler
    pos = {lid: i for i, lid in enumerate(scaler.link_ids)}
    idx = [pos[lid] for lid in link_ids]
    return replace(scaler, mean=scaler.mean[idx], std=scaler.std[idx], link_ids=tuple(link_ids))


# ---------------------------------------------------------------------------
# Cluster-CALF


def check_assignment_provenance(assignment: ClusterAssignment, train_rows: RowRange) -> None:
    """Reject partitions derived from correlations that saw non-training rows."""
    if assignment.rows is None:
        return
    if assignment.rows.source != train_rows.source:
        raise LeakageError("cluster assignment was computed on a different source matrix")
    require_training_rows(assignment.rows, "correlation fit for clustering")
    if train_rows.train_stop is not None and assignment.rows.train_stop != train_rows.train_stop:
        raise LeakageError("cluster assignment and training data disagree on the training split")


def train_cluster_calf(assignment: ClusterAssignment, calf_cfg: CALFConfig, train_cfg: TrainConfig,
                       train: WindowBatch, val: WindowBatch) -> tuple[ClusterCALF, RunLog]:
    """One CALF per cluster, each trained on its member series only."""
    if assignment.n_series != train.N:
        raise ArgumentError(f"assignment covers {assignment.n_series} series, data has {train.N}")
    check_assignment_provenance(assignment, train.rows)
    models, logs = {}, {}
    for c in range(assignment.k):
        members = assignment.members(c)
        if len(members) == 0:
            raise ConfigurationError(f"cluster {c} has no members")
        m, lg = train_model("calf", calf_cfg, train_cfg, train.select_links(members), val.select_links(members))
        models[c], logs[c] = m, lg
    merged = RunLog(
        fingerprint({"arch": "cluster-calf", "labels": assignment.labels.tolist(),
                     "model": calf_cfg.to_dict(), "train": train_cfg.to_dict()}),
        parts=logs,
    )
    return ClusterCALF(assignment, models), merged


def fit_cluster_assignment(train: NetworkMTS, k: int, method: str = "spearman") -> ClusterAssignment:
    """Correlation clustering on the training split only."""
    require_training_rows(train.rows, "correlation fit for clustering")
    return cluster_series(correlation_matrix(train, method), k)


# ---------------------------------------------------------------------------
# Grid search


@dataclass(frozen=True)
class GridSpec:
    horizons: tuple[int, ...] = (1, 3, 6, 12, 24)
    sequence_lengths: tuple[int, ...] = (24, 168, 336)
    params: Mapping[str, Sequence] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        object.__setattr__(self, "sequence_lengths", tuple(int(x) for x in self.sequence_lengths))
        object.__setattr__(self, "params", {k: tuple(v) for k, v in dict(self.params).items()})
        if not self.horizons or not self.sequence_lengths:
            raise ArgumentError("grid needs at least one horizon and one sequence length")
        if any(h < 1 for h in self.horizons) or any(x < 1 for x in self.sequence_lengths):
            raise ArgumentError("horizons and sequence lengths must be positive")
        for k, v in self.params.items():
            if not v:
                raise ArgumentError(f"grid parameter {k!r} has no values")

    def points(self) -> list[tuple[int, int, dict]]:
        keys = sorted(self.params)
        combos = list(itertools.product(*(self.params[k] for k in keys))) if keys else [()]
        return [
            (L, H, dict(zip(keys, combo)))
            for L in self.sequence_lengths
            for H in self.horizons
            for combo in combos
        ]


@dataclass
class GridResult:
    config_id: str
    arch: str
    L: int
    H: int
    params: dict
    val_smape: float
    test_smape: float
    run_log: RunLog
    test_report: MetricReport
    val_report: MetricReport
    wall_s: float
    model: nn.Module | None = None

    @property
    def epochs(self) -> int:
        return self.run_log.n_epochs

    def summary(self) -> dict:
        s = self.test_report.aggregate["smape"]
        return {
            "config_id": self.config_id,
            "arch": self.arch,
            "L": self.L,
            "H": self.H,
            "params": self.params,
            "val_smape": self.val_smape,
            "test_smape": self.test_smape,
            "smape_mean": s.mean,
            "smape_median": s.median,
            "smape_std": s.std,
            "epochs": self.epochs,
            "best_epoch": self.run_log.best_epoch,
        }


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Raw and scaled splits plus the train-fitted scaler."""

    train: NetworkMTS
    val: NetworkMTS
    test: NetworkMTS
    scaler: ScalerState
    graph: LineDigraph | None = None

    @classmethod
    def from_splits(cls, train, val, test, graph=None) -> PreparedData:
        return cls(train, val, test, fit_scaler(train), graph)

    def windows(self, which: str, L: int, H: int, scaled: bool) -> WindowBatch:
        raw = getattr(self, which)
        return make_windows(transform(self.scaler, raw) if scaled else raw, L, H)


def point_feasible(prep: PreparedData, L: int, H: int) -> str | None:
    """Reason a (L, H) point cannot run, or None."""
    n_train = n_windows(prep.train.T, L, H)
    if n_train < MIN_TRAIN_WINDOWS:
        return f"{n_train} training windows < {MIN_TRAIN_WINDOWS}"
    for which in ("val", "test"):
        T = getattr(prep, which).T
        if T < L + H:
            return f"{which} split has {T} rows < L+H={L + H}"
    return None


def make_model_config(arch: str, N: int, L: int, H: int, params: Mapping, graph: LineDigraph | None):
    params = dict(params)
    if arch == "lstm":
        return LSTMConfig(n_series=N, input_length=L, horizon=H, **params)
    if arch == "ntgat":
        if graph is None:
            raise ConfigurationError("ntgat needs the network graph")
        hops = int(params.pop("hops", 2))
        mode = params.pop("adjacency_mode", "symmetric")
        loops = bool(params.pop("self_loops", True))
        adj = k_hop_adjacency(graph, hops, mode, loops)
        return NTGATConfig(n_series=N, input_length=L, horizon=H, adjacency=adj, **params)
    if arch in ("calf", "cluster-calf"):
        params.pop("k", None)
        params.pop("cluster_method", None)
        return CALFConfig(input_length=L, horizon=H, **params)
    raise ArgumentError(f"unknown architecture {arch!r}")


def config_id(arch: str, L: int, H: int, varied: Mapping | None = None) -> str:
    varied = dict(varied or {})
    pstr = "-".join(f"{k}{varied[k]}" for k in sorted(varied))
    return f"{arch}-L{L}-H{H}" + (f"-{pstr}" if pstr else "")


def run_point(arch: str, L: int, H: int, params: Mapping, prep: PreparedData,
              train_cfg: TrainConfig, keep_model: bool = False,
              varied: Mapping | None = None) -> GridResult:
    """Train and evaluate one configuration on prepared splits.

    ``varied`` names the grid-swept subset of ``params`` used in the config id
    (all of ``params`` when omitted).
    """
    t0 = time.perf_counter()
    cfg = make_model_config(arch, prep.train.N, L, H, params, prep.graph)
    tr = prep.windows("train", L, H, scaled=True)
    va = prep.windows("val", L, H, scaled=True)
    te = prep.windows("test", L, H, scaled=True)
    if arch == "cluster-calf":
        k = int(params.get("k", 1))
        method = params.get("cluster_method", "spearman")
        assignment = fit_cluster_assignment(prep.train, k, method)
        model, run_log = train_cluster_calf(assignment, cfg, train_cfg, tr, va)
    else:
        model, run_log = train_model(arch, cfg, train_cfg, tr, va)
    val_raw = prep.windows("val", L, H, scaled=False)
    test_raw = prep.windows("test", L, H, scaled=False)
    val_rep = per_series_report(predict(model, va, prep.scaler).predictions, val_raw.targets, val_raw.link_ids)
    test_rep = per_series_report(predict(model, te, prep.scaler).predictions, test_raw.targets, test_raw.link_ids)
    run_log.final_metrics = {"val_smape": val_rep.mean("smape"), "test_smape": test_rep.mean("smape")}
    return GridResult(
        config_id=config_id(arch, L, H, params if varied is None else varied),
        arch=arch,
        L=L,
        H=H,
        params=dict(params),
        val_smape=val_rep.mean("smape"),
        test_smape=test_rep.mean("smape"),
        run_log=run_log,
        test_report=test_rep,
        val_report=val_rep,
        wall_s=time.perf_counter() - t0,
        model=model if keep_model else None,
    )


def grid_search(arch: str, grid: GridSpec, prep: PreparedData, train_cfg: TrainConfig,
                base_params: Mapping | None = None, n_jobs: int = 1) -> list[GridResult]:
    """Train one model per feasible grid point; rank by mean validation sMAPE.

    Infeasible points are skipped with a warning. Ties keep grid order.
    """
    if arch not in ARCHS:
        raise ArgumentError(f"unknown architecture {arch!r}")
    tasks = []
    for L, H, params in grid.points():
        reason = point_feasible(prep, L, H)
        if reason:
            log.warning("skipping %s L=%d H=%d %s: %s", arch, L, H, params, reason)
            continue
        tasks.append((L, H, {**dict(base_params or {}), **params}, params))
    if n_jobs == 1:
        results = [run_point(arch, L, H, p, prep, train_cfg, varied=v) for L, H, p, v in tasks]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs, backend="loky")(
            delayed(run_point)(arch, L, H, p, prep, train_cfg, varied=v) for L, H, p, v in tasks
        )
    order = sorted(range(len(results)), key=lambda i: (results[i].val_smape, i))
    return [results[i] for i in order]
