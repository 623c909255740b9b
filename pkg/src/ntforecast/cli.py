"""``ntforecast`` command line: generate, decompose, cluster, train, sweep,
evaluate and report, all driven by one config file.

Exit codes: 0 success, 2 invalid config or arguments, 3 missing artifact,
4 runtime or training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from .config import PipelineConfig, load_config
from .data import NetworkMTS, decompose, load_csv, split
from .errors import (
    ArgumentError,
    ConfigurationError,
    ForecastError,
    MissingArtifactError,
    TrainingError,
)
from .evaluation import MetricReport, cluster_sweep_report, compare_models, horizon_sweep_report, per_series_report
from .graph import LineDigraph, correlation_matrix, line_digraph
from .synth import synth_generate
from .training import (
    ARCHS,
    PreparedData,
    fit_cluster_assignment,
    grid_search,
    point_feasible,
    predict,
    run_point,
)

log = logging.getLogger("ntforecast")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("generate", "decompose", "cluster", "train", "sweep", "evaluate", "report")
LOG_ENV = "NTFORECAST_LOG"


class Run:
    """Output bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: PipelineConfig, tag: str | None = None):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.name = command if tag is None else f"{command}-{tag}"
        self.outputs: list[Path] = []
        self.status = "ok"
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, *parts: str) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def fresh_dir(self, *parts: str) -> Path:
        """Directory owned by this command; cleared so re-runs leave no stale files."""
        d = self.out.joinpath(*parts)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d

    def record(self, *paths: Path) -> None:
        self.outputs.extend(Path(p) for p in paths)

    def write_manifest(self) -> Path:
        outputs = []
        for p in sorted(set(self.outputs)):
            if p.exists():
                outputs.append({
                    "path": p.relative_to(self.out).as_posix(),
                    "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                })
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "status": self.status,
            "versions": versions(),
            "outputs": outputs,
        }
        path = self.path("manifests", f"{self.name}.json")
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        self._prune_other_manifests(path, {o["path"] for o in outputs})
        return path

    def _prune_other_manifests(self, own: Path, mine: set[str]) -> None:
        """Drop entries now owned by this run, or deleted by it, from older manifests."""
        for other in sorted(own.parent.glob("*.json")):
            if other == own:
                continue
            m = json.loads(other.read_text())
            kept = [o for o in m["outputs"] if o["path"] not in mine and (self.out / o["path"]).exists()]
            if len(kept) != len(m["outputs"]):
                m["outputs"] = kept
                other.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")


def versions() -> dict:
    out = {"python": platform.python_version()}
    for dist in ("artifact", "numpy", "pandas", "scipy", "torch"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


# ---------------------------------------------------------------------------
# Data access


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact {path} ({hint})")
    return path


def _load_graph(path: Path, link_ids: tuple[str, ...]) -> LineDigraph:
    """Graph file: either ``graph_arcs`` over ``link_ids`` (as written by
    ``generate``) or ``network_arcs`` as ``[src, dst]`` node pairs."""
    obj = json.loads(path.read_text())
    if "network_arcs" in obj:
        g = line_digraph([tuple(a) for a in obj["network_arcs"]])
    else:
        g = LineDigraph(tuple(obj["link_ids"]), tuple(tuple(a) for a in obj["graph_arcs"]))
    if set(g.node_ids) != set(link_ids):
        raise ConfigurationError(f"graph {path} does not describe the data's links")
    order = [g.node_ids.index(lid) for lid in link_ids]
    inverse = np.argsort(order)
    return LineDigraph(tuple(link_ids), tuple((int(inverse[i]), int(inverse[j])) for i, j in g.arcs))


def load_dataset(cfg: PipelineConfig) -> tuple[NetworkMTS, LineDigraph | None]:
    out = Path(cfg.output_dir)
    if cfg.data.synth is not None:
        csv = _require(out / "data" / "series.csv", "run `generate` first")
        graph_path = _require(out / "data" / "graph.json", "run `generate` first")
    else:
        csv = _require(Path(cfg.data.path), "data.path")
        graph_path = Path(cfg.data.graph) if cfg.data.graph else None
        if graph_path is not None:
            _require(graph_path, "data.graph")
    data = load_csv(csv, unit=cfg.data.unit)
    graph = _load_graph(graph_path, data.link_ids) if graph_path is not None else None
    return data, graph


def prepare(cfg: PipelineConfig, min_rows: int = 1) -> PreparedData:
    data, graph = load_dataset(cfg)
    train, val, test = split(data, cfg.split.spec(), min_rows=min_rows)
    return PreparedData.from_splits(train, val, test, graph)


def _arch_for(cfg: PipelineConfig, arch: str | None, command: str) -> str:
    if arch is not None:
        return arch
    if len(cfg.archs) == 1:
        return cfg.archs[0]
    raise ConfigurationError(f"archs: {command} needs --arch when the config lists several architectures")


def _params(cfg: PipelineConfig, arch: str) -> dict:
    params = cfg.fixed_params(arch)
    if arch == "cluster-calf":
        params.update(k=cfg.cluster.k, cluster_method=cfg.cluster.method)
    return params


def _write_report(run: Run, report: MetricReport, directory: Path, stem: str = "metrics") -> None:
    files = [directory / f"{stem}.csv", directory / f"{stem}.json", directory / f"{stem}_by_horizon.csv"]
    report.write(*files)
    run.record(*files)


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(run: Run, args) -> None:
    cfg = run.cfg
    if cfg.data.synth is None:
        raise ConfigurationError("data.synth: generate needs a synthetic data spec")
    s = cfg.data.synth
    res = synth_generate(s.n_links, s.n_hours, s.n_clusters, seed=cfg.seed, noise=s.noise)
    csv, side = run.path("data", "series.csv"), run.path("data", "graph.json")
    res.write(csv, side)
    run.record(csv, side)


def cmd_decompose(run: Run, args) -> None:
    data, _ = load_dataset(run.cfg)
    d = run.fresh_dir("decompose")
    parts = {name: np.empty(data.values.shape) for name in ("trend", "seasonal_daily", "seasonal_weekly", "residual")}
    for n in range(data.N):
        res = decompose(data.values[:, n])
        for name in parts:
            parts[name][:, n] = getattr(res, name)
    stamps = data.timestamps.strftime("%Y-%m-%dT%H:%M:%SZ")
    for name, values in parts.items():
        frame = pd.DataFrame(values, columns=list(data.link_ids))
        frame.insert(0, "timestamp", stamps)
        path = d / f"{name}.csv"
        frame.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
        run.record(path)


def cmd_cluster(run: Run, args) -> None:
    cfg = run.cfg
    prep = prepare(cfg)
    d = run.fresh_dir("cluster")
    corr = correlation_matrix(prep.train, cfg.cluster.method)
    cpath = d / f"correlation_{cfg.cluster.method}.csv"
    pd.DataFrame(corr.rho, index=list(prep.train.link_ids), columns=list(prep.train.link_ids)).to_csv(
        cpath, lineterminator="\n", float_format="%.17g"
    )
    run.record(cpath)
    for k in cfg.cluster.k_list:
        if k > prep.train.N:
            log.warning("skipping k=%d: only %d series", k, prep.train.N)
            continue
        a = fit_cluster_assignment(prep.train, k, cfg.cluster.method)
        path = d / f"assignment_k{k}.json"
        path.write_text(json.dumps({
            "k": k,
            "method": cfg.cluster.method,
            "labels": [int(x) for x in a.labels],
            "link_ids": list(prep.train.link_ids),
            "rows": a.rows.to_dict() if a.rows else None,
        }, indent=2) + "\n")
        run.record(path)


def _failed_log(run: Run, exc: TrainingError, directory: Path) -> Path | None:
    if exc.run_log is None:
        return None
    path = directory / "runlog_failed.jsonl"
    exc.run_log.to_jsonl(path)
    run.record(path)
    return path


def cmd_train(run: Run, args) -> None:
    from .models.checkpoint import save_checkpoint

    cfg = run.cfg
    arch = _arch_for(cfg, args.arch, "train")
    L, H = cfg.window.input_length, cfg.window.horizon
    prep = prepare(cfg, min_rows=L + H)
    reason = point_feasible(prep, L, H)
    if reason:
        raise ConfigurationError(f"window: L={L}, H={H} infeasible ({reason})")
    d = run.fresh_dir("train", arch)
    try:
        params = _params(cfg, arch)
        varied = {"k": params["k"]} if arch == "cluster-calf" else {}
        res = run_point(arch, L, H, params, prep, cfg.train_config(), keep_model=True, varied=varied)
    except TrainingError as exc:
        path = _failed_log(run, exc, d)
        raise TrainingError(f"{exc} (run log: {path})", exc.run_log) from None
    run.record(*save_checkpoint(res.model, d / "checkpoint", seed=cfg.seed))
    runlog = d / "runlog.jsonl"
    res.run_log.to_jsonl(runlog)
    summary = d / "summary.json"
    summary.write_text(json.dumps({
        "config_id": res.config_id,
        "val_smape": res.val_smape,
        "test_smape": res.test_smape,
        "best_epoch": res.run_log.best_epoch,
        "epochs": res.epochs,
    }, indent=2, sort_keys=True) + "\n")
    run.record(runlog, summary)


def cmd_evaluate(run: Run, args) -> None:
    from .models.checkpoint import load_checkpoint

    cfg = run.cfg
    arch = _arch_for(cfg, args.arch, "evaluate")
    ck = _require(Path(cfg.output_dir) / "train" / arch / "checkpoint" / "manifest.json", "run `train` first")
    model, manifest = load_checkpoint(ck.parent)
    mcfg = manifest["config"]["calf"] if arch == "cluster-calf" else manifest["config"]
    L, H = mcfg["input_length"], mcfg["horizon"]
    prep = prepare(cfg, min_rows=L + H)
    scaled = prep.windows("test", L, H, scaled=True)
    raw = prep.windows("test", L, H, scaled=False)
    out = predict(model, scaled, prep.scaler)
    report = per_series_report(out.predictions, raw.targets, raw.link_ids)
    _write_report(run, report, run.fresh_dir("evaluate", arch))


GRID_COLUMNS = ["config_id", "H", "L", "arch", "val_smape", "test_smape", "epochs", "wall_s"]
RESULT_COLUMNS = ["config_id", "arch", "L", "H", "params", "val_smape", "test_smape",
                  "smape_mean", "smape_median", "smape_std", "epochs", "best_epoch", "rank"]


def cmd_sweep(run: Run, args) -> None:
    cfg = run.cfg
    prep = prepare(cfg)
    for arch in ([args.arch] if args.arch else cfg.archs):
        d = run.fresh_dir("sweep", arch)
        base = _params(cfg, arch)
        base.pop("k", None)  # swept for cluster-calf
        try:
            results = grid_search(arch, cfg.grid_spec(arch), prep, cfg.train_config(), base,
                                  n_jobs=cfg.train.n_jobs)
        except TrainingError as exc:
            path = _failed_log(run, exc, d)
            raise TrainingError(f"{arch}: {exc} (run log: {path})", exc.run_log) from None
        grid_rows, result_rows = [], []
        for rank, res in enumerate(results, start=1):
            s = res.summary()
            grid_rows.append({**{k: s[k] for k in GRID_COLUMNS if k in s}, "wall_s": res.wall_s})
            varied = {k: res.params[k] for k in cfg.grid_params(arch) if k in res.params}
            result_rows.append({**s, "params": json.dumps(varied, sort_keys=True), "rank": rank})
            pdir = d / "points" / res.config_id
            pdir.mkdir(parents=True)
            _write_report(run, res.test_report, pdir)
            _write_report(run, res.val_report, pdir, stem="val_metrics")
            res.run_log.to_jsonl(pdir / "runlog.jsonl")
            run.record(pdir / "runlog.jsonl")
        grid = d / "grid_table.csv"
        pd.DataFrame(grid_rows, columns=GRID_COLUMNS).to_csv(grid, index=False, lineterminator="\n")
        table = d / "results.csv"
        pd.DataFrame(result_rows, columns=RESULT_COLUMNS).to_csv(table, index=False, lineterminator="\n")
        run.record(grid, table)


def _load_results(out: Path) -> pd.DataFrame:
    frames = []
    for arch in ARCHS:
        path = out / "sweep" / arch / "results.csv"
        if path.exists():
            frames.append(pd.read_csv(path, dtype={"params": str, "best_epoch": "Int64"}, float_precision="round_trip"))
    if not frames:
        raise MissingArtifactError(f"no sweep results under {out / 'sweep'} (run `sweep` first)")
    return pd.concat(frames, ignore_index=True)


def _point_report(out: Path, arch: str, config_id: str) -> MetricReport:
    d = out / "sweep" / arch / "points" / config_id
    _require(d / "metrics.csv", "sweep output incomplete")
    return MetricReport.read(d / "metrics.csv", d / "metrics.json", d / "metrics_by_horizon.csv")


def cmd_report(run: Run, args) -> None:
    cfg = run.cfg
    out = Path(cfg.output_dir)
    results = _load_results(out)
    d = run.fresh_dir("report")
    grid = d / "grid_report.csv"
    results.sort_values(["arch", "L", "H", "rank"], kind="mergesort").to_csv(grid, index=False, lineterminator="\n")
    run.record(grid)

    horizon_sweep_report(results, d)
    run.record(*sorted(d.glob("horizon_sweep*")))

    # best-validated point per (arch, L, H)
    best = results.sort_values(["arch", "L", "H", "val_smape"], kind="mergesort").drop_duplicates(["arch", "L", "H"])
    for (L, H), grp in best.groupby(["L", "H"], sort=True):
        reports = {row.arch: _point_report(out, row.arch, row.config_id) for row in grp.itertuples()}
        if len(reports) > 1:
            baseline = "lstm" if "lstm" in reports else sorted(reports)[0]
            path = d / f"compare_L{L}_H{H}.csv"
            compare_models(reports, baseline).to_csv(path, index=False, lineterminator="\n")
            run.record(path)

    cc = results[results["arch"] == "cluster-calf"]
    calf = best[best["arch"] == "calf"]
    for (L, H), grp in cc.groupby(["L", "H"], sort=True):
        base_rows = calf[(calf["L"] == L) & (calf["H"] == H)]
        if base_rows.empty:
            continue
        per_k: dict[int, MetricReport] = {}
        for row in grp.sort_values("val_smape", kind="mergesort").itertuples():
            k = int(json.loads(row.params)["k"])
            per_k.setdefault(k, _point_report(out, "cluster-calf", row.config_id))
        baseline = _point_report(out, "calf", base_rows.iloc[0]["config_id"])
        sub = d / f"cluster_L{L}_H{H}"
        cluster_sweep_report(per_k, baseline, sub)
        run.record(*sorted(sub.iterdir()))


HANDLERS = {
    "generate": cmd_generate,
    "decompose": cmd_decompose,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntforecast", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML or JSON pipeline config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="overrides the config output_dir")
    p.add_argument("--arch", choices=ARCHS, help="architecture for train/evaluate, or to restrict sweep")
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "output_dir": args.out})
    except FileNotFoundError:
        print(f"error[missing]: config file {args.config} not found", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigurationError, ArgumentError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    tag = args.arch if args.command in ("train", "evaluate", "sweep") and args.arch else None
    if args.command in ("train", "evaluate") and tag is None and len(cfg.archs) == 1:
        tag = cfg.archs[0]
    run = Run(args.command, cfg, tag)
    code = EXIT_OK
    try:
        HANDLERS[args.command](run, args)
    except MissingArtifactError as exc:
        print(f"error[missing]: {exc}", file=sys.stderr)
        code = EXIT_MISSING
    except (ConfigurationError, ArgumentError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except TrainingError as exc:
        print(f"error[training]: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    except ForecastError as exc:
        print(f"error[runtime]: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    if code != EXIT_OK:
        run.status = "failed"
    path = run.write_manifest()
    if code == EXIT_OK:
        print(f"{args.command}: wrote {len(run.outputs)} files; manifest {path}")
    return code


if __name__ == "__main__":
    sys.exit(main())
