"""Network multivariate time series: ingestion, splitting, scaling, windowing
and additive seasonal decomposition.

Every ``NetworkMTS`` carries a ``RowRange`` recording which rows of its source
matrix it covers and, once the source has been split, where the training
split ends.  Fitting routines (scalers, correlation-based clustering) consult
this fingerprint so that nothing is ever fit on validation or test rows.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import (
    ArgumentError,
    ConfigurationError,
    DataError,
    IntegrityError,
    LeakageError,
    ParseError,
    StateError,
)

HOUR = pd.Timedelta(hours=1)
DAY = 24
WEEK = 168


@dataclass(frozen=True)
class RowRange:
    """Absolute row span ``[start, stop)`` of a source matrix."""

    source: str
    start: int
    stop: int
    train_stop: int | None = None

    def covers_only_training(self) -> bool:
        return self.train_stop is not None and self.stop <= self.train_stop

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "start": self.start,
            "stop": self.stop,
            "train_stop": self.train_stop,
        }


def require_training_rows(rows: RowRange, what: str) -> None:
    """Raise ``LeakageError`` unless ``rows`` lies inside the training split."""
    if rows.train_stop is None:
        raise LeakageError(
            f"{what} requires a training split; got unsplit data "
            f"(rows {rows.start}..{rows.stop})"
        )
    if rows.stop > rows.train_stop:
        raise LeakageError(
            f"{what} touches rows {rows.train_stop}..{rows.stop} beyond the "
            f"training split (ends at row {rows.train_stop})"
        )


def _digest(values: np.ndarray, link_ids: Sequence[str]) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(values, dtype=np.float64).tobytes())
    h.update("\x1f".join(link_ids).encode())
    return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class NetworkMTS:
    """A ``T x N`` matrix of hourly link measurements.

    ``scaled`` marks z-scored copies produced by a ``ScalerState``; those may
    hold negative values, raw traffic may not.
    """

    timestamps: pd.DatetimeIndex
    link_ids: tuple[str, ...]
    values: np.ndarray
    metadata: dict = field(default_factory=dict)
    rows: RowRange | None = None
    scaled: bool = False

    def __post_init__(self):
        ts = pd.DatetimeIndex(self.timestamps)
        if ts.tz is None:
            ts = ts.tz_localize("UTC")
        else:
            ts = ts.tz_convert("UTC")
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ArgumentError(f"values must be 2-D (T x N), got shape {values.shape}")
        link_ids = tuple(str(x) for x in self.link_ids)
        T, N = values.shape
        if len(ts) != T:
            raise ArgumentError(f"{len(ts)} timestamps for {T} value rows")
        if len(link_ids) != N:
            raise ArgumentError(f"{len(link_ids)} link ids for {N} value columns")
        if len(set(link_ids)) != N:
            raise ArgumentError("link_ids must be unique")
        if T > 1:
            steps = np.diff(ts.asi8)
            if not np.all(steps == HOUR.value):
                bad = int(np.flatnonzero(steps != HOUR.value)[0]) + 1
                raise IntegrityError(
                    f"timestamps must advance by exactly one hour; row {bad} "
                    f"({ts[bad]}) follows {ts[bad - 1]}"
                )
        if not np.all(np.isfinite(values)):
            r, c = np.argwhere(~np.isfinite(values))[0]
            raise DataError(f"non-finite value at row {r}, column {c}", row=int(r), col=int(c))
        if not self.scaled and np.any(values < 0):
            r, c = np.argwhere(values < 0)[0]
            raise DataError(f"negative value at row {r}, column {c}", row=int(r), col=int(c))
        values.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "link_ids", link_ids)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "metadata", dict(self.metadata))
        if self.rows is None:
            object.__setattr__(self, "rows", RowRange(_digest(values, link_ids), 0, T))

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    def slice_rows(self, start: int, stop: int) -> NetworkMTS:
        """Rows ``[start, stop)`` relative to this object, provenance preserved."""
        if not 0 <= start < stop <= self.T:
            raise ArgumentError(f"row slice {start}:{stop} out of range for T={self.T}")
        rows = replace(self.rows, start=self.rows.start + start, stop=self.rows.start + stop)
        return replace(
            self,
            timestamps=self.timestamps[start:stop],
            values=self.values[start:stop],
            rows=rows,
        )

    def select_links(self, indices: Sequence[int]) -> NetworkMTS:
        idx = [int(i) for i in indices]
        return replace(
            self,
            link_ids=tuple(self.link_ids[i] for i in idx),
            values=self.values[:, idx],
        )

    def with_values(self, values: np.ndarray, scaled: bool) -> NetworkMTS:
        return replace(self, values=values, scaled=scaled)


def concat_rows(parts: Sequence[NetworkMTS]) -> NetworkMTS:
    """Rejoin chronologically adjacent pieces of one source matrix."""
    if not parts:
        raise ArgumentError("nothing to concatenate")
    first = parts[0]
    for prev, nxt in zip(parts, parts[1:]):
        if nxt.link_ids != first.link_ids or nxt.rows.source != first.rows.source:
            raise ArgumentError("parts come from different sources")
        if nxt.rows.start != prev.rows.stop:
            raise ArgumentError("parts are not contiguous")
    rows = replace(first.rows, stop=parts[-1].rows.stop)
    return replace(
        first,
        timestamps=pd.DatetimeIndex(np.concatenate([p.timestamps.asi8 for p in parts])).tz_localize("UTC"),
        values=np.concatenate([p.values for p in parts], axis=0),
        rows=rows,
    )


# ---------------------------------------------------------------------------
# CSV I/O


def _parse_timestamp(text: str, row: int) -> pd.Timestamp:
    try:
        ts = pd.Timestamp(datetime.fromisoformat(text.strip().replace("Z", "+00:00")))
    except ValueError:
        raise ParseError(f"row {row}: malformed ISO-8601 timestamp {text!r}", row=row) from None
    if ts.tzinfo is None:
        return ts.tz_localize("UTC")
    return ts.tz_convert("UTC")


def load_csv(path: str | Path, unit: str = "Mbps") -> NetworkMTS:
    """Read ``timestamp,<link_1>,...,<link_N>`` CSV into a ``NetworkMTS``.

    Row numbers in error messages count data rows from 1; column numbers
    count link columns from 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", row=0) from None
        if not header or header[0].strip() != "timestamp" or len(header) < 2:
            raise ParseError(f"{path}: header must be 'timestamp,<link_id>,...'", row=0)
        link_ids = [h.strip() for h in header[1:]]
        stamps, rows = [], []
        for i, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"row {i}: expected {len(header)} fields, got {len(rec)}", row=i)
            stamps.append(_parse_timestamp(rec[0], i))
            vals = []
            for j, cell in enumerate(rec[1:], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"row {i}, column {j}: not a number: {cell!r}", row=i, col=j) from None
                if not math.isfinite(v) or v < 0:
                    raise DataError(
                        f"row {i}, column {j} (link {link_ids[j - 1]!r}): invalid value {cell!r}",
                        row=i,
                        col=j,
                    )
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows", row=1)
    for i in range(1, len(stamps)):
        if stamps[i] - stamps[i - 1] != HOUR:
            raise IntegrityError(
                f"row {i + 1}: timestamp {stamps[i].isoformat()} does not follow "
                f"{stamps[i - 1].isoformat()} by one hour"
            )
    return NetworkMTS(
        timestamps=pd.DatetimeIndex(stamps),
        link_ids=tuple(link_ids),
        values=np.array(rows, dtype=np.float64),
        metadata={"unit": unit, "source_path": str(path)},
    )


def save_csv(data: NetworkMTS, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", *data.link_ids])
        for ts, row in zip(data.timestamps, data.values):
            w.writerow([ts.strftime("%Y-%m-%dT%H:%M:%SZ"), *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    test_fraction: float = 0.15

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(not (0 < f < 1) for f in fr):
            raise ArgumentError(f"split fractions must lie in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ArgumentError(f"split fractions must sum to 1, got {sum(fr)!r}")

    def sizes(self, T: int) -> tuple[int, int, int]:
        """Floor train, floor val, remainder to test."""
        n_train = math.floor(T * self.train_fraction + 1e-9)
        n_val = math.floor(T * self.val_fraction + 1e-9)
        return n_train, n_val, T - n_train - n_val

    def minimum_length(self, min_rows: int) -> int:
        T = 3 * max(min_rows, 1)
        while min(self.sizes(T)) < max(min_rows, 1):
            T += 1
        return T


def split(data: NetworkMTS, spec: SplitSpec, min_rows: int = 1) -> tuple[NetworkMTS, NetworkMTS, NetworkMTS]:
    """Chronological train/val/test split.

    ``min_rows`` is the per-split minimum, normally ``L + H`` for the windowing
    that will follow.
    """
    sizes = spec.sizes(data.T)
    if min(sizes) < max(min_rows, 1):
        raise ConfigurationError(
            f"T={data.T} gives split sizes {sizes}; each split needs at least "
            f"{max(min_rows, 1)} rows, so T must be at least {spec.minimum_length(min_rows)}"
        )
    n_train, n_val, _ = sizes
    train_stop = data.rows.start + n_train
    marked = replace(data, rows=replace(data.rows, train_stop=train_stop))
    return (
        marked.slice_rows(0, n_train),
        marked.slice_rows(n_train, n_train + n_val),
        marked.slice_rows(n_train + n_val, data.T),
    )


# ---------------------------------------------------------------------------
# Scaling


@dataclass(frozen=True, eq=False)
class ScalerState:
    mean: np.ndarray
    std: np.ndarray
    fitted_on: RowRange
    link_ids: tuple[str, ...]


def fit_scaler(train: NetworkMTS) -> ScalerState:
    """Per-series z-score parameters fit on the training split only.

    Uses the sample standard deviation; constant series get ``std = 1``.
    """
    require_training_rows(train.rows, "scaler fit")
    if train.scaled:
        raise ArgumentError("scaler must be fit on unscaled data")
    if train.T < 2:
        raise ArgumentError("scaler fit needs at least 2 rows")
    mean = train.values.mean(axis=0)
    std = train.values.std(axis=0, ddof=1)
    std = np.where(std > 0, std, 1.0)
    mean.setflags(write=False)
    std.setflags(write=False)
    return ScalerState(mean=mean, std=std, fitted_on=train.rows, link_ids=train.link_ids)


def _check_state(state: ScalerState | None, n: int) -> None:
    if state is None:
        raise StateError("scaler used before fit")
    if len(state.mean) != n:
        raise ArgumentError(f"scaler fitted on {len(state.mean)} series, data has {n}")


def transform(state: ScalerState | None, data):
    """Z-score ``data`` (a ``NetworkMTS`` or an array whose last axis is series)."""
    if isinstance(data, NetworkMTS):
        _check_state(state, data.N)
        if data.scaled:
            raise ArgumentError("data is already scaled")
        return data.with_values((data.values - state.mean) / state.std, scaled=True)
    arr = np.asarray(data, dtype=np.float64)
    _check_state(state, arr.shape[-1])
    return (arr - state.mean) / state.std


def inverse_transform(state: ScalerState | None, data):
    if isinstance(data, NetworkMTS):
        _check_state(state, data.N)
        if not data.scaled:
            raise ArgumentError("data is not scaled")
        return data.with_values(data.values * state.std + state.mean, scaled=False)
    arr = np.asarray(data, dtype=np.float64)
    _check_state(state, arr.shape[-1])
    return arr * state.std + state.mean


class Scaler:
    """Stateful wrapper: ``fit`` is the only mutating call."""

    def __init__(self):
        self.state: ScalerState | None = None

    def fit(self, train: NetworkMTS) -> Scaler:
        self.state = fit_scaler(train)
        return self

    def transform(self, data):
        return transform(self.state, data)

    def inverse_transform(self, data):
        return inverse_transform(self.state, data)


# ---------------------------------------------------------------------------
# Windowing


@dataclass(frozen=True, eq=False)
class WindowBatch:
    """Direct multi-horizon samples.

    ``origin_indices[i]`` is the absolute source row of sample ``i``'s first
    target step.
    """

    inputs: np.ndarray
    targets: np.ndarray
    origin_indices: np.ndarray
    link_ids: tuple[str, ...]
    rows: RowRange
    scaled: bool

    @property
    def S(self) -> int:
        return self.inputs.shape[0]

    @property
    def L(self) -> int:
        return self.inputs.shape[1]

    @property
    def H(self) -> int:
        return self.targets.shape[1]

    @property
    def N(self) -> int:
        return self.inputs.shape[2]

    def select_links(self, indices: Sequence[int]) -> WindowBatch:
        idx = [int(i) for i in indices]
        return replace(
            self,
            inputs=self.inputs[:, :, idx],
            targets=self.targets[:, :, idx],
            link_ids=tuple(self.link_ids[i] for i in idx),
        )


def n_windows(T: int, L: int, H: int) -> int:
    return max(T - L - H + 1, 0)


def make_windows(data: NetworkMTS, L: int, H: int) -> WindowBatch:
    if L < 1 or H < 1:
        raise ArgumentError(f"L and H must be positive, got L={L}, H={H}")
    if data.T < L + H:
        raise ConfigurationError(f"T={data.T} is shorter than L+H={L + H}")
    S = n_windows(data.T, L, H)
    view = np.lib.stride_tricks.sliding_window_view(data.values, L + H, axis=0)
    # view: S x N x (L+H)
    win = np.ascontiguousarray(view.transpose(0, 2, 1))
    return WindowBatch(
        inputs=win[:, :L, :].copy(),
        targets=win[:, L:, :].copy(),
        origin_indices=data.rows.start + L + np.arange(S),
        link_ids=data.link_ids,
        rows=data.rows,
        scaled=data.scaled,
    )


# ---------------------------------------------------------------------------
# Decomposition


@dataclass(frozen=True, eq=False)
class DecompositionResult:
    trend: np.ndarray
    seasonal_daily: np.ndarray
    seasonal_weekly: np.ndarray
    residual: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.trend + self.seasonal_daily + self.seasonal_weekly + self.residual


def centered_moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; even windows use the 2 x m form.

    Positions without a full window are held at the nearest valid value.
    """
    if window % 2 == 0:
        kernel = np.ones(window + 1)
        kernel[0] = kernel[-1] = 0.5
        kernel /= window
    else:
        kernel = np.ones(window) / window
    half = len(kernel) // 2
    valid = np.convolve(x, kernel, mode="valid")
    out = np.empty_like(x, dtype=np.float64)
    out[half : half + len(valid)] = valid
    out[:half] = valid[0]
    out[half + len(valid) :] = valid[-1]
    return out


def _period_profile(x: np.ndarray, period: int) -> np.ndarray:
    phase = np.arange(len(x)) % period
    sums = np.bincount(phase, weights=x, minlength=period)
    counts = np.bincount(phase, minlength=period)
    profile = sums / counts
    profile -= profile.mean()
    return profile[phase]


def decompose(series) -> DecompositionResult:
    """Additive trend + daily + weekly + residual decomposition of an hourly series."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ArgumentError("decompose expects a 1-D series")
    if len(x) < 2 * WEEK:
        raise ConfigurationError(f"series of length {len(x)} is too short; need at least {2 * WEEK}")
    trend = centered_moving_average(x, WEEK)
    detrended = x - trend
    daily = _period_profile(detrended, DAY)
    weekly = _period_profile(detrended - daily, WEEK)
    residual = x - trend - daily - weekly
    return DecompositionResult(trend, daily, weekly, residual)


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
