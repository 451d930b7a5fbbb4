"""Forecast metrics, the sampled multi-run evaluation protocol, and ablations."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, ScalingParams, WindowedSample
from .errors import ContractError, DataError, RankError
from .lora import AdaptedModel, inject_lora, trainable_param_count, validate_rank
from .model import Forecaster, rollout
from .training import TrainConfig, train_loop

log = logging.getLogger(__name__)

SETTINGS = ("zero_shot", "full_ft", "lora_ft")
METRICS = ("mse", "dtw", "mape")
N_SAMPLES = 20
N_RUNS = 10
MAPE_EPS = 1e-8


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ContractError(f"prediction has {p.size} steps, truth has {t.size}")
    if p.size == 0:
        raise ContractError("cannot score an empty forecast")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((p - t) ** 2))


def mape(pred, truth) -> float:
    """Mean absolute percentage error in percent; ``|truth|`` floored at 1e-8."""
    p, t = _pair(pred, truth)
    return float(100.0 * np.mean(np.abs(p - t) / np.maximum(np.abs(t), MAPE_EPS)))


def dtw_distance(a, b) -> float:
    """Classic DTW: cost ``|a_i - b_j|``, steps down/right/diagonal, no band."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ContractError("dtw_distance needs two non-empty series")
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :]).tolist()
    prev = [0.0] * m
    acc = 0.0
    for j in range(m):
        acc += cost[0][j]
        prev[j] = acc
    for i in range(1, n):
        row = cost[i]
        cur = [0.0] * m
        cur[0] = prev[0] + row[0]
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best + row[j]
        prev = cur
    return float(prev[-1])


def aggregate_median(samples) -> np.ndarray:
    """Per-step median over sample paths (``n_samples x h``)."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise ContractError(f"expected (n_samples >= 1, h) paths, got shape {s.shape}")
    return np.median(s, axis=0)


# ------------------------------------------------------------- protocol


@dataclass
class MetricsReport:
    model: str
    setting: str
    vital: str
    per_run: dict[str, list[float]]
    trainable_params: int = 0
    total_params: int = 0

    @property
    def n_runs(self) -> int:
        return len(self.per_run["mse"])

    @property
    def mse(self) -> float:
        return float(np.mean(self.per_run["mse"]))

    @property
    def dtw(self) -> float:
        return float(np.mean(self.per_run["dtw"]))

    @property
    def mape(self) -> float:
        return float(np.mean(self.per_run["mape"]))

    def mean(self, metric: str) -> float:
        return getattr(self, metric)


def point_forecasts(model, test: Sequence[WindowedSample], n_samples: int, seed: int,
                    h: int | None = None) -> np.ndarray:
    """Median-of-samples forecast for every window, ``(n_windows, h)``."""
    h = h or test[0].horizon.size
    contexts = np.repeat(np.array([s.context for s in test]), n_samples, axis=0)
    paths = rollout(model, contexts, h, np.random.default_rng(seed))
    paths = paths.reshape(len(test), n_samples, h)
    return np.stack([aggregate_median(p) for p in paths])


def evaluate_model(model, test: Sequence[WindowedSample], scaling: ScalingParams | dict,
                   n_samples: int = N_SAMPLES, n_runs: int = N_RUNS, seed: int = 0,
                   label: str = "model", setting: str = "zero_shot",
                   trainable_params: int | None = None) -> MetricsReport:
    """Sampled forecasts, reduced by median, scored and averaged per run.

    Run ``r`` uses seed ``seed + r``. MSE and DTW are computed on the
    normalised scale, MAPE on inverse-scaled values; each is averaged over
    windows within a run.
    """
    if not test:
        raise DataError("test split is empty")
    if n_samples < 1 or n_runs < 1:
        raise ContractError("n_samples and n_runs must be >= 1")
    vital = test[0].vital
    if isinstance(scaling, dict):
        scaling = scaling[vital]
    truth = np.array([s.horizon for s in test])
    truth_raw = scaling.inverse(truth)
    per_run: dict[str, list[float]] = {m: [] for m in METRICS}
    for r in range(n_runs):
        pred = point_forecasts(model, test, n_samples, seed + r)
        pred_raw = scaling.inverse(pred)
        per_run["mse"].append(float(np.mean([mse(p, t) for p, t in zip(pred, truth)])))
        per_run["dtw"].append(float(np.mean([dtw_distance(p, t) for p, t in zip(pred, truth)])))
        per_run["mape"].append(float(np.mean([mape(p, t) for p, t in zip(pred_raw, truth_raw)])))
    if trainable_params is None:
        if setting == "zero_shot":
            trainable_params = 0
        elif isinstance(model, AdaptedModel):
            trainable_params = trainable_param_count(model, "lora")
        else:
            trainable_params = trainable_param_count(model, "full")
    return MetricsReport(label, setting, vital, per_run, int(trainable_params),
                         int(model.num_params()))


# ------------------------------------------------------------ report CSVs


def _fmt(x: float) -> str:
    return repr(float(x))


def write_long_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "setting", "vital", "metric", "run", "value"])
        for rep in reports:
            for metric in METRICS:
                for r, v in enumerate(rep.per_run[metric]):
                    w.writerow([rep.model, rep.setting, rep.vital, metric, r, _fmt(v)])


def read_long_csv(path) -> list[MetricsReport]:
    reports: dict[tuple[str, str, str], dict[str, dict[int, float]]] = {}
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["model"], row["setting"], row["vital"])
            reports.setdefault(key, {m: {} for m in METRICS})[row["metric"]][int(row["run"])] = \
                float(row["value"])
    out = []
    for (model, setting, vital), runs in reports.items():
        per_run = {m: [runs[m][k] for k in sorted(runs[m])] for m in METRICS}
        out.append(MetricsReport(model, setting, vital, per_run))
    return out


def write_wide_csv(reports: Sequence[MetricsReport], path) -> None:
    """One row per (model, setting); MSE/DTW/MAPE columns per vital."""
    vitals = sorted({r.vital for r in reports})
    rows: dict[tuple[str, str], dict[str, float]] = {}
    for rep in reports:
        cells = rows.setdefault((rep.model, rep.setting), {})
        for metric in METRICS:
            cells[f"{rep.vital}_{metric}"] = rep.mean(metric)
    header = ["model", "setting"] + [f"{v}_{m}" for v in vitals for m in METRICS]

    def order(key):
        model, setting = key
        return (model, SETTINGS.index(setting) if setting in SETTINGS else len(SETTINGS), setting)

    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for key in sorted(rows, key=order):
            cells = rows[key]
            w.writerow([*key] + [_fmt(cells[c]) if c in cells else "" for c in header[2:]])


# --------------------------------------------------------------- ablations


@dataclass
class RankRow:
    rank: int
    trainable_params: int
    mse: float
    dtw: float
    mape: float
    report: MetricsReport | None = field(default=None, repr=False)


def rank_sweep(base: Forecaster, dataset: Dataset, ranks: Sequence[int], alpha: float = 16.0,
               train_config: TrainConfig | None = None, n_samples: int = N_SAMPLES,
               n_runs: int = N_RUNS, seed: int = 0, label: str = "model") -> list[RankRow]:
    """Inject, LoRA fine-tune and evaluate once per rank; rows sorted by rank."""
    if not ranks:
        raise RankError("rank list is empty", flag="ranks")
    for r in ranks:
        validate_rank(r, base.config.d_model)  # all ranks checked before any training
    unique = sorted(set(int(r) for r in ranks))
    if len(unique) != len(ranks):
        log.warning("duplicate ranks dropped: %s -> %s", list(ranks), unique)
    train_config = train_config or TrainConfig(mode="lora_ft", seed=seed)
    rows = []
    for r in unique:
        adapted = inject_lora(base, r=r, alpha=alpha, seed=seed)
        train_loop(adapted, dataset, train_config)
        rep = evaluate_model(adapted, dataset.test, dataset.scaling, n_samples, n_runs, seed,
                             label=f"{label}-r{r}", setting="lora_ft")
        rows.append(RankRow(r, trainable_param_count(adapted, "lora"), rep.mse, rep.dtw, rep.mape, rep))
    return rows


def write_rank_csv(rows: Sequence[RankRow], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "trainable_params", "mse", "dtw", "mape"])
        for row in rows:
            w.writerow([row.rank, row.trainable_params, _fmt(row.mse), _fmt(row.dtw), _fmt(row.mape)])


def metric_spread(rows: Sequence[RankRow], metric: str = "mse") -> float:
    values = [getattr(r, metric) for r in rows]
    return float(max(values) - min(values))


@dataclass
class TradeoffRow:
    label: str
    setting: str
    vital: str
    total_params: int
    finetuned_params: int
    mape: float


def param_tradeoff(reports: Sequence[MetricsReport]) -> list[TradeoffRow]:
    if not reports:
        raise ContractError("param_tradeoff needs at least one report")
    return [
        TradeoffRow(rep.model, rep.setting, rep.vital, rep.total_params,
                    0 if rep.setting == "zero_shot" else rep.trainable_params, rep.mape)
        for rep in reports
    ]


def write_tradeoff_csv(rows: Sequence[TradeoffRow], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "setting", "vital", "total_params", "finetuned_params", "mape"])
        for row in rows:
            w.writerow([row.label, row.setting, row.vital, row.total_params,
                        row.finetuned_params, _fmt(row.mape)])
