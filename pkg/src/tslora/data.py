"""Vital-sign series: synthesis, CSV ingest and the preprocessing chain.

The chain always runs in this order::

    forward fill -> low-pass filter -> global min-max scaling -> windowing -> split

Scaling is fitted on the training patients only, so split membership is
decided (by patient) before scaling is applied; the windows themselves are
assigned to splits last.

Synthetic corpora
-----------------
:func:`generate_synthetic` draws, for patient ``i`` and step ``t``::

    x[t] = baseline + amplitude * sin(2 * pi * t / period + phase)
           + trend * t + e[t]
    e[t] = phi * e[t-1] + sigma * z[t],   z[t] ~ N(0, 1),   e[-1] ~ N(0, sigma^2 / (1 - phi^2))

with per-patient constants drawn uniformly from the regime's ranges
(:data:`REGIMES`). Each entry is then dropped (set missing) independently
with probability ``missing_prob``.

* ``source`` stands in for a broad pretraining mix: baselines anywhere in
  [0, 300], slow periods of 8-20 hours, a small linear trend and strong
  short-memory noise.
* ``target`` is vital-sign-like: a physiological baseline (MeanBP 65-95 mmHg,
  HeartRate 70-110 bpm), faster oscillations with 1.5-4 hour periods,
  persistent low-amplitude noise and no trend.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataError, EmptySeriesError, ScalingError, SplitError

log = logging.getLogger(__name__)

CONTEXT_LENGTH = 72
HORIZON = 36
STEP_MINUTES = 5
VITALS = ("MeanBP", "HeartRate")
CSV_HEADER = ["patient_id", "series_id", "vital", "timestamp", "value"]
_EPOCH = datetime(2000, 1, 1)


@dataclass
class TimeSeries:
    values: np.ndarray  # NaN marks a missing entry
    series_id: str
    patient_id: str
    vital: str = "MeanBP"
    step_minutes: int = STEP_MINUTES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size < 1:
            raise DataError(f"series {self.series_id!r} is empty")
        if self.step_minutes <= 0:
            raise ConfigError("step_minutes must be positive", flag="step_minutes")

    def __len__(self) -> int:
        return self.values.size

    @property
    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())

    def with_values(self, values) -> "TimeSeries":
        return replace(self, values=np.asarray(values, dtype=np.float64))


@dataclass
class WindowedSample:
    context: np.ndarray
    horizon: np.ndarray
    series_id: str
    patient_id: str
    vital: str
    offset: int = 0

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.context, self.horizon])


@dataclass(frozen=True)
class ScalingParams:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise ScalingError(f"min-max scaling needs max > min, got [{self.min}, {self.max}]")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min)

    def inverse(self, x):
        return np.asarray(x, dtype=np.float64) * (self.max - self.min) + self.min


@dataclass
class Dataset:
    train: list[WindowedSample]
    val: list[WindowedSample]
    test: list[WindowedSample]
    scaling: dict[str, ScalingParams] = field(default_factory=dict)

    def split(self, name: str) -> list[WindowedSample]:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


# ---------------------------------------------------------------- cleaning


def forward_fill(series: TimeSeries) -> TimeSeries:
    """Carry the last observation forward; leading gaps take the first observation."""
    x = series.values
    observed = ~np.isnan(x)
    if not observed.any():
        raise EmptySeriesError(f"series {series.series_id!r} has no observed values")
    idx = np.where(observed, np.arange(x.size), -1)
    np.maximum.accumulate(idx, out=idx)
    idx[idx < 0] = int(np.argmax(observed))
    return series.with_values(x[idx])


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average; near the ends only the in-range points are averaged."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(n)
    lo = np.maximum(i - half, 0)
    hi = np.minimum(i + half + 1, n)
    return (csum[hi] - csum[lo]) / (hi - lo)


def low_pass_filter(series: TimeSeries, window: int = 5) -> TimeSeries:
    if isinstance(window, bool) or not isinstance(window, (int, np.integer)) or window < 1 or window % 2 == 0:
        raise ConfigError(f"filter window must be an odd positive integer, got {window!r}",
                          flag="filter_window")
    if series.has_missing:
        raise DataError(f"series {series.series_id!r} still has missing values; forward fill first")
    out = moving_average(series.values, window)
    if np.ptp(series.values) == 0:
        out = series.values.copy()  # exact, not just within rounding
    return series.with_values(out)


# ----------------------------------------------------------------- scaling


def fit_min_max(pool: Iterable[TimeSeries | np.ndarray]) -> ScalingParams:
    values = [np.asarray(s.values if isinstance(s, TimeSeries) else s, dtype=np.float64).ravel()
              for s in pool]
    if not values or sum(v.size for v in values) == 0:
        raise ScalingError("cannot fit min-max scaling on an empty pool")
    allv = np.concatenate(values)
    if np.isnan(allv).any():
        raise DataError("scaling pool contains missing values")
    lo, hi = float(allv.min()), float(allv.max())
    if hi == lo:
        raise ScalingError(f"scaling pool is constant ({lo}); min-max is undefined")
    return ScalingParams(lo, hi)


def apply_min_max(series: TimeSeries, params: ScalingParams) -> TimeSeries:
    return series.with_values(params.apply(series.values))


# --------------------------------------------------------------- windowing


def make_windows(series: TimeSeries, C: int = CONTEXT_LENGTH, h: int = HORIZON,
                 stride: int = HORIZON) -> list[WindowedSample]:
    """Windows of ``C + h`` points at offsets 0, stride, 2*stride, ... (fully inside)."""
    if stride < 1:
        raise ConfigError(f"stride must be positive, got {stride}", flag="stride")
    x = series.values
    total = C + h
    return [
        WindowedSample(
            context=x[off:off + C].copy(),
            horizon=x[off + C:off + total].copy(),
            series_id=series.series_id,
            patient_id=series.patient_id,
            vital=series.vital,
            offset=off,
        )
        for off in range(0, x.size - total + 1, stride)
    ]


# --------------------------------------------------------------- splitting

RATIOS = (8, 1, 1)


def assign_groups(group_sizes: dict[str, int], ratios: Sequence[float] = RATIOS,
                  seed: int = 0) -> dict[str, int]:
    """Map each group to split 0/1/2 so sample counts track ``ratios``.

    Groups are shuffled by ``seed`` and dealt out in order; each cut is placed
    where the cumulative sample count is closest to its target, so every
    split is off by less than one group.
    """
    groups = sorted(group_sizes)
    if len(groups) < len(ratios):
        raise SplitError(f"need at least {len(ratios)} groups for a {len(ratios)}-way split, "
                         f"got {len(groups)}")
    order = [groups[i] for i in np.random.default_rng(seed).permutation(len(groups))]
    sizes = np.array([group_sizes[g] for g in order])
    total = sizes.sum()
    cum = np.concatenate([[0], np.cumsum(sizes)])
    fractions = np.cumsum(ratios)[:-1] / np.sum(ratios)
    cuts = []
    prev = 0
    for k, frac in enumerate(fractions):
        target = frac * total
        # each split keeps at least one group
        lo = prev + 1
        hi = len(order) - (len(ratios) - 1 - k)
        candidates = np.arange(lo, hi + 1)
        best = int(candidates[np.argmin(np.abs(cum[candidates] - target))])
        cuts.append(best)
        prev = best
    bounds = [0, *cuts, len(order)]
    return {g: k for k in range(len(ratios)) for g in order[bounds[k]:bounds[k + 1]]}


def split_dataset(samples: Sequence[WindowedSample], ratios: Sequence[float] = RATIOS,
                  seed: int = 0, group_by: str = "patient_id",
                  scaling: dict[str, ScalingParams] | None = None) -> Dataset:
    if len(samples) < 10:
        raise SplitError(f"need at least 10 samples to split, got {len(samples)}")
    sizes: dict[str, int] = {}
    for s in samples:
        key = getattr(s, group_by)
        sizes[key] = sizes.get(key, 0) + 1
    membership = assign_groups(sizes, ratios, seed)
    parts: list[list[WindowedSample]] = [[], [], []]
    for s in samples:
        parts[membership[getattr(s, group_by)]].append(s)
    return Dataset(*parts, scaling=dict(scaling or {}))


# ---------------------------------------------------------------- pipeline


def prepare_dataset(series: Sequence[TimeSeries], C: int = CONTEXT_LENGTH, h: int = HORIZON,
                    stride: int = HORIZON, filter_window: int = 5, seed: int = 0) -> Dataset:
    """Full chain: fill -> filter -> scale (per vital, training patients) -> window -> split."""
    cleaned = [low_pass_filter(forward_fill(s), filter_window) for s in series]

    counts: dict[str, int] = {}
    for s in cleaned:
        n = len(make_windows(s, C, h, stride))
        if n:
            counts[s.patient_id] = counts.get(s.patient_id, 0) + n
    if sum(counts.values()) < 10:
        raise SplitError(f"need at least 10 windows to split, got {sum(counts.values())}")
    membership = assign_groups(counts, RATIOS, seed)

    scaling = {}
    for vital in sorted({s.vital for s in cleaned}):
        pool = [s for s in cleaned if s.vital == vital and membership.get(s.patient_id) == 0]
        if pool:
            scaling[vital] = fit_min_max(pool)

    parts: list[list[WindowedSample]] = [[], [], []]
    for s in cleaned:
        if s.patient_id not in membership:
            continue
        if s.vital not in scaling:
            raise DataError(f"vital {s.vital!r} has no training series to fit scaling on")
        for w in make_windows(apply_min_max(s, scaling[s.vital]), C, h, stride):
            parts[membership[s.patient_id]].append(w)
    return Dataset(*parts, scaling=scaling)


# ---------------------------------------------------------------- synthesis

REGIMES = {
    "source": {
        "baseline": {"MeanBP": (0.0, 300.0), "HeartRate": (0.0, 300.0)},
        "amplitude": (5.0, 60.0),
        "period": (96.0, 240.0),
        "trend": (-0.15, 0.15),
        "phi": (0.0, 0.5),
        "sigma": (4.0, 12.0),
    },
    "target": {
        "baseline": {"MeanBP": (65.0, 95.0), "HeartRate": (70.0, 110.0)},
        "amplitude": (4.0, 12.0),
        "period": (18.0, 48.0),
        "trend": (0.0, 0.0),
        "phi": (0.8, 0.95),
        "sigma": (0.3, 1.0),
    },
}


def generate_synthetic(n_patients: int, series_len: int, regime: str = "target", seed: int = 0,
                       vital: str = "MeanBP", missing_prob: float = 0.02) -> list[TimeSeries]:
    """One series per patient from the named regime; see the module docstring."""
    if regime not in REGIMES:
        raise ConfigError(f"regime must be one of {sorted(REGIMES)}, got {regime!r}", flag="regime")
    if vital not in VITALS:
        raise ConfigError(f"vital must be one of {VITALS}, got {vital!r}", flag="vital")
    if series_len < CONTEXT_LENGTH + HORIZON:
        raise ConfigError(f"series_len must be >= {CONTEXT_LENGTH + HORIZON}, got {series_len}",
                          flag="series_len")
    if n_patients < 1:
        raise ConfigError("n_patients must be positive", flag="n_patients")
    if not 0.0 <= missing_prob < 1.0:
        raise ConfigError("missing_prob must lie in [0, 1)", flag="missing_prob")
    cfg = REGIMES[regime]
    rng = np.random.default_rng(seed)
    t = np.arange(series_len, dtype=np.float64)
    out = []
    for i in range(n_patients):
        baseline = rng.uniform(*cfg["baseline"][vital])
        amplitude = rng.uniform(*cfg["amplitude"])
        period = rng.uniform(*cfg["period"])
        phase = rng.uniform(0.0, 2 * np.pi)
        trend = rng.uniform(*cfg["trend"])
        phi = rng.uniform(*cfg["phi"])
        sigma = rng.uniform(*cfg["sigma"])
        z = rng.standard_normal(series_len)
        e = np.empty(series_len)
        prev = rng.normal(0.0, sigma / np.sqrt(1.0 - phi * phi))
        for k in range(series_len):
            prev = phi * prev + sigma * z[k]
            e[k] = prev
        x = baseline + amplitude * np.sin(2 * np.pi * t / period + phase) + trend * t + e
        drop = rng.random(series_len) < missing_prob
        x[drop] = np.nan
        pid = f"{regime}-{vital}-p{i:04d}"
        out.append(TimeSeries(x, series_id=f"{pid}-s0", patient_id=pid, vital=vital))
    return out


# -------------------------------------------------------------------- CSV


def write_csv(series: Iterable[TimeSeries], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in series:
            for k, v in enumerate(s.values):
                ts = (_EPOCH + timedelta(minutes=s.step_minutes * k)).isoformat()
                w.writerow([s.patient_id, s.series_id, s.vital, ts, "" if np.isnan(v) else repr(float(v))])


def read_csv(path) -> list[TimeSeries]:
    """Read the long-format CSV; rows of one series must sit on a regular grid."""
    rows: dict[tuple[str, str, str], list[tuple[datetime, float]]] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
        for row in reader:
            key = (row["patient_id"], row["series_id"], row["vital"])
            value = float(row["value"]) if row["value"].strip() else np.nan
            rows.setdefault(key, []).append((datetime.fromisoformat(row["timestamp"]), value))
    out = []
    for (pid, sid, vital), points in rows.items():
        points.sort(key=lambda p: p[0])
        steps = {(b[0] - a[0]) for a, b in zip(points, points[1:])}
        if len(steps) > 1:
            raise DataError(f"series {sid!r} is not on a regular time grid")
        minutes = int(steps.pop().total_seconds() // 60) if steps else STEP_MINUTES
        out.append(TimeSeries(np.array([p[1] for p in points]), series_id=sid, patient_id=pid,
                              vital=vital, step_minutes=minutes))
    return out


# ----------------------------------------------------------- dataset file


def save_dataset(ds: Dataset, path) -> None:
    """Container with one ``<split>.context`` / ``<split>.horizon`` array pair per split."""
    meta = {
        "scaling": {v: [p.min, p.max] for v, p in sorted(ds.scaling.items())},
        "splits": {},
    }
    arrays = {}
    for name in ("train", "val", "test"):
        samples = ds.split(name)
        meta["splits"][name] = [[s.series_id, s.patient_id, s.vital, s.offset] for s in samples]
        C = samples[0].context.size if samples else 0
        h = samples[0].horizon.size if samples else 0
        arrays[f"{name}.context"] = np.array([s.context for s in samples]).reshape(len(samples), C)
        arrays[f"{name}.horizon"] = np.array([s.horizon for s in samples]).reshape(len(samples), h)
    write_container(path, "dataset", meta, arrays)


def load_dataset(path) -> Dataset:
    kind, meta, arrays = read_container(path)
    if kind != "dataset":
        raise DataError(f"{path}: expected a dataset file, found {kind!r}")
    parts = []
    for name in ("train", "val", "test"):
        ctx, hor = arrays[f"{name}.context"], arrays[f"{name}.horizon"]
        parts.append([
            WindowedSample(ctx[i].copy(), hor[i].copy(), sid, pid, vital, int(off))
            for i, (sid, pid, vital, off) in enumerate(meta["splits"][name])
        ])
    scaling = {v: ScalingParams(lo, hi) for v, (lo, hi) in meta["scaling"].items()}
    return Dataset(*parts, scaling=scaling)
