"""Forecast error metrics, per-series distributions and comparison reports.

All metrics are computed in original (inverse-scaled) units. sMAPE uses the
0-200 convention; standard deviations across series are population (ddof=0).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ArgumentError, ContractError, ShapeError

METRICS = ("smape", "mape", "mae", "mse", "rmse")
STD_CONVENTION = "population"


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise ShapeError(f"pred has {p.size} values, actual has {a.size}")
    if p.size == 0:
        raise ArgumentError("metrics need at least one value")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(a))):
        raise ArgumentError("metrics need finite values")
    return p, a


def smape(pred, actual) -> float:
    """Symmetric MAPE in percent on the 0-200 scale; 0/0 terms count as 0."""
    p, a = _pair(pred, actual)
    denom = np.abs(p) + np.abs(a)
    terms = np.divide(2.0 * np.abs(p - a), denom, out=np.zeros_like(denom), where=denom > 0)
    return float(100.0 * terms.mean())


def standard_metrics(pred, actual) -> dict:
    """MAE, MSE, RMSE and MAPE (percent).

    MAPE skips terms whose actual is zero and reports how many were skipped;
    when every actual is zero it is NaN and ``mape_defined`` is False.
    """
    p, a = _pair(pred, actual)
    err = p - a
    mse = float(np.mean(err * err))
    nz = a != 0
    skipped = int((~nz).sum())
    if nz.any():
        with np.errstate(over="ignore"):
            mape = float(100.0 * np.mean(np.abs(err[nz]) / np.abs(a[nz])))
    else:
        mape = math.nan
    return {
        "mae": float(np.mean(np.abs(err))),
        "mse": mse,
        "rmse": math.sqrt(mse),
        "mape": mape,
        "mape_skipped": skipped,
        "mape_defined": bool(nz.any()),
    }


def all_metrics(pred, actual) -> dict:
    m = standard_metrics(pred, actual)
    m["smape"] = smape(pred, actual)
    return m


@dataclass(frozen=True)
class DistributionStats:
    mean: float
    median: float
    std: float
    min: float
    max: float
    q1: float
    q3: float
    count: int

    @classmethod
    def of(cls, values) -> DistributionStats:
        v = np.asarray(values, dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size == 0:
            nan = math.nan
            return cls(nan, nan, nan, nan, nan, nan, nan, 0)
        q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
        return cls(
            mean=float(v.mean()),
            median=float(med),
            std=float(v.std(ddof=0)),
            min=float(v.min()),
            max=float(v.max()),
            q1=float(q1),
            q3=float(q3),
            count=int(v.size),
        )


def window_fingerprint(targets) -> str:
    arr = np.ascontiguousarray(np.asarray(targets, dtype=np.float64))
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class MetricReport:
    per_series: pd.DataFrame
    per_horizon: pd.DataFrame
    aggregate: dict
    window_fingerprint: str

    def mean(self, metric: str = "smape") -> float:
        return self.aggregate[metric].mean

    def std(self, metric: str = "smape") -> float:
        return self.aggregate[metric].std

    def horizon_summary(self) -> pd.DataFrame:
        """Mean over series of each metric, per horizon step."""
        return self.per_horizon.groupby("horizon", sort=True)[list(METRICS)].mean().reset_index()

    def to_csv(self, path: str | Path) -> None:
        self.per_series[["link_id", *METRICS]].to_csv(path, index=False, lineterminator="\n")

    def aggregate_dict(self) -> dict:
        return {
            "std_convention": STD_CONVENTION,
            "window_fingerprint": self.window_fingerprint,
            "metrics": {m: asdict(s) for m, s in self.aggregate.items()},
        }

    def write(self, csv_path: str | Path, json_path: str | Path,
              horizon_path: str | Path | None = None) -> None:
        self.to_csv(csv_path)
        Path(json_path).write_text(json.dumps(self.aggregate_dict(), indent=2, sort_keys=True) + "\n")
        if horizon_path is not None:
            self.per_horizon.to_csv(horizon_path, index=False, lineterminator="\n")

    @classmethod
    def read(cls, csv_path: str | Path, json_path: str | Path,
             horizon_path: str | Path | None = None) -> MetricReport:
        """Rebuild a report written by :meth:`write`; aggregates are recomputed."""
        per_series = pd.read_csv(csv_path, dtype={"link_id": str}, float_precision="round_trip")
        meta = json.loads(Path(json_path).read_text())
        if horizon_path is not None:
            per_horizon = pd.read_csv(horizon_path, dtype={"link_id": str}, float_precision="round_trip")
        else:
            per_horizon = pd.DataFrame(columns=["horizon", "link_id", *METRICS])
        aggregate = {k: DistributionStats.of(per_series[k].to_numpy()) for k in METRICS}
        return cls(per_series, per_horizon, aggregate, meta["window_fingerprint"])


def per_series_report(predictions, targets, link_ids: Sequence[str], units: str = "original") -> MetricReport:
    """Per-series and per-(series, horizon step) metrics over ``S x H x N`` tensors."""
    if units != "original":
        raise ContractError(f"metrics must be computed in original units, got units={units!r}")
    p = np.asarray(predictions, dtype=np.float64)
    a = np.asarray(targets, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 3:
        raise ShapeError(f"predictions {p.shape} and targets {a.shape} must both be S x H x N")
    S, H, N = p.shape
    if len(link_ids) != N:
        raise ShapeError(f"{len(link_ids)} link ids for {N} series")
    rows = []
    hrows = []
    for n in range(N):
        m = all_metrics(p[:, :, n], a[:, :, n])
        rows.append({"link_id": link_ids[n], **{k: m[k] for k in METRICS}})
        for h in range(H):
            mh = all_metrics(p[:, h, n], a[:, h, n])
            hrows.append({"horizon": h + 1, "link_id": link_ids[n], **{k: mh[k] for k in METRICS}})
    per_series = pd.DataFrame(rows, columns=["link_id", *METRICS])
    per_horizon = pd.DataFrame(hrows, columns=["horizon", "link_id", *METRICS])
    aggregate = {k: DistributionStats.of(per_series[k].to_numpy()) for k in METRICS}
    return MetricReport(per_series, per_horizon, aggregate, window_fingerprint(a))


# ---------------------------------------------------------------------------
# Comparison reports


def pct_decrease(baseline: float, value: float) -> float:
    """``100 * (baseline - value) / baseline``; positive means improvement."""
    if baseline == 0:
        return 0.0 if value == 0 else -math.inf
    return 100.0 * (baseline - value) / baseline


def _save_plot(fig, path: Path) -> None:
    fig.savefig(path, dpi=100, metadata={"Software": None})


def horizon_sweep_report(results, out_dir: str | Path | None = None) -> pd.DataFrame:
    """Mean sMAPE against horizon for each (architecture, sequence length).

    ``results`` is a DataFrame or records with ``arch, L, H, smape_mean`` and
    optionally ``smape_median, smape_std``. ``is_best`` marks the lowest-sMAPE
    horizon per curve, ties going to the smallest horizon.
    """
    df = pd.DataFrame(results)
    if df.empty:
        raise ArgumentError("no grid results to report")
    for col in ("smape_median", "smape_std"):
        if col not in df:
            df[col] = np.nan
    # one row per (arch, L, H): keep the best-validated grid point if several
    if "val_smape" in df:
        df = df.sort_values(["arch", "L", "H", "val_smape"], kind="mergesort")
    df = df.drop_duplicates(["arch", "L", "H"], keep="first")
    table = df[["arch", "L", "H", "smape_mean", "smape_median", "smape_std"]].sort_values(
        ["arch", "L", "H"], kind="mergesort"
    ).reset_index(drop=True)
    table["is_best"] = False
    for _, grp in table.groupby(["arch", "L"], sort=True):
        best = grp.sort_values(["smape_mean", "H"], kind="mergesort").index[0]
        table.loc[best, "is_best"] = True
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "horizon_sweep.csv", index=False, lineterminator="\n")
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for arch, grp in table.groupby("arch", sort=True):
            fig, ax = plt.subplots(figsize=(6, 4))
            for L, curve in grp.groupby("L", sort=True):
                ax.plot(curve["H"], curve["smape_mean"], marker="o", label=f"L={L}")
                b = curve[curve["is_best"]]
                ax.scatter(b["H"], b["smape_mean"], s=120, facecolors="none", edgecolors="k")
            ax.set_xlabel("horizon (h)")
            ax.set_ylabel("mean sMAPE (%)")
            ax.set_title(f"{arch}: sMAPE vs horizon")
            ax.legend()
            fig.tight_layout()
            _save_plot(fig, out / f"horizon_sweep_{arch}.png")
            plt.close(fig)
    return table


def _check_windows(reports: Mapping, what: str) -> None:
    prints = {r.window_fingerprint for r in reports.values()}
    if len(prints) > 1:
        raise ContractError(f"{what}: reports were computed on different evaluation windows")


def compare_models(reports: Mapping[str, MetricReport], baseline: str) -> pd.DataFrame:
    """sMAPE mean/median/std per architecture with percentage decrease vs ``baseline``."""
    if baseline not in reports:
        raise ArgumentError(f"baseline {baseline!r} not among reports {sorted(reports)}")
    _check_windows(reports, "compare_models")
    base = reports[baseline].aggregate["smape"]
    rows = []
    for arch, rep in reports.items():
        s = rep.aggregate["smape"]
        rows.append({
            "arch": arch,
            "smape_mean": s.mean,
            "smape_median": s.median,
            "smape_std": s.std,
            "mean_decrease_pct": pct_decrease(base.mean, s.mean),
            "median_decrease_pct": pct_decrease(base.median, s.median),
            "std_decrease_pct": pct_decrease(base.std, s.std),
        })
    return pd.DataFrame(rows)


def cluster_sweep_report(results: Mapping[int, MetricReport], baseline: MetricReport,
                         out_dir: str | Path | None = None) -> pd.DataFrame:
    """Mean sMAPE/MAE/RMSE per cluster count against the unclustered baseline."""
    if not results:
        raise ArgumentError("no cluster runs to report")
    _check_windows({**{str(k): r for k, r in results.items()}, "baseline": baseline}, "cluster_sweep_report")
    b = {m: baseline.mean(m) for m in ("smape", "mae", "rmse")}
    rows = []
    for k in sorted(results):
        r = results[k]
        rows.append({
            "k": int(k),
            "smape_mean": r.mean("smape"),
            "mae_mean": r.mean("mae"),
            "rmse_mean": r.mean("rmse"),
            "smape_std": r.std("smape"),
            "baseline_smape_mean": b["smape"],
            "baseline_mae_mean": b["mae"],
            "baseline_rmse_mean": b["rmse"],
            "smape_decrease_pct": pct_decrease(b["smape"], r.mean("smape")),
            "smape_std_decrease_pct": pct_decrease(baseline.std("smape"), r.std("smape")),
        })
    table = pd.DataFrame(rows)
    best = table.sort_values(["smape_mean", "k"], kind="mergesort").index[0]
    table["is_best"] = table.index == best
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "cluster_sweep.csv", index=False, lineterminator="\n")
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
        for ax, m in zip(axes, ("smape", "mae", "rmse")):
            ax.plot(table["k"], table[f"{m}_mean"], marker="o")
            ax.axhline(b[m], linestyle=":", color="k", label="no clustering")
            ax.set_xlabel("clusters (k)")
            ax.set_ylabel(f"mean {m.upper()}")
        axes[0].legend()
        fig.tight_layout()
        _save_plot(fig, out / "cluster_sweep.png")
        plt.close(fig)
    return table
