"""
Feature engineering: train-mean imputation, standardization, EMA/EMV
processing, hypoxemia horizon labels and lookback windows
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.signal import lfilter

from .coerce import FloatList
from .dataset import Cohort, SurgeryRecord, cohort_stats
from .errors import FeatureLayoutError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class EmaConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alphas_ema: FloatList = Field(default_factory=lambda: [5.0, 1.0, 0.1])
    alpha_emv: float = 5.0
    dt_min: float = 1.0

    @field_validator("alphas_ema")
    @classmethod
    def _positive_alphas(cls, v: list[float]) -> list[float]:
        if not v or any(a <= 0 for a in v):
            raise ValueError("alphas_ema must be a non-empty list of positive rates")
        return v

    @field_validator("alpha_emv", "dt_min")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be positive")
        return v


class LabelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threshold: float = Field(default=92.0, gt=0.0, le=100.0)
    horizon_min: int = Field(default=5, ge=1)
    require_currently_normal: bool = True


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel (or per-column) mean/std fitted on training surgeries only"""

    means: Mapping[str, float]
    stds: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "means", MappingProxyType(dict(self.means)))
        object.__setattr__(self, "stds", MappingProxyType(dict(self.stds)))

    def __contains__(self, name: str) -> bool:
        return name in self.means

    def subset(self, names: Iterable[str]) -> "NormalizationStats":
        names = [n for n in names if n in self]
        return NormalizationStats({n: self.means[n] for n in names}, {n: self.stds[n] for n in names})

    def scale(self, name: str, values: np.ndarray) -> np.ndarray:
        return (values - self.means[name]) / max(self.stds[name], STD_FLOOR)

    def to_dict(self) -> dict:
        return {"means": dict(self.means), "stds": dict(self.stds)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "NormalizationStats":
        return cls(means=data["means"], stds=data["stds"])

    @classmethod
    def identity(cls, names: Iterable[str]) -> "NormalizationStats":
        names = list(names)
        return cls(means={n: 0.0 for n in names}, stds={n: 1.0 for n in names})


def fit_normalization(train_cohort: Cohort) -> NormalizationStats:
    """Channel means/stds from a train-partition sub-cohort; all-missing channels get (0, 1)"""
    means, stds = {}, {}
    for name, summary in cohort_stats(train_cohort).items():
        if summary.degenerate:
            logger.warning(f"Channel '{name}' is all-missing in the training partition, using mean 0 / std 1")
            means[name], stds[name] = 0.0, 1.0
        else:
            means[name], stds[name] = summary.mean, summary.std
    return NormalizationStats(means, stds)


def _check_covered(cohort: Cohort, stats: NormalizationStats) -> None:
    absent = [n for n in cohort.schema.names if n not in stats]
    if absent:
        raise FeatureLayoutError(f"normalization stats missing channels: {', '.join(absent)}")


def _transform(cohort: Cohort, stats: NormalizationStats, standardize: bool) -> Cohort:
    _check_covered(cohort, stats)
    surgeries = []
    for s in cohort:
        series = {}
        for name, values in s.series.items():
            filled = np.ma.filled(values.astype(float), stats.means[name])
            series[name] = np.ma.array(stats.scale(name, filled) if standardize else filled)
        statics = {}
        for name, value in s.statics.items():
            value = stats.means[name] if value is None else value
            statics[name] = float(stats.scale(name, np.float64(value))) if standardize else value
        surgeries.append(SurgeryRecord(s.surgery_id, statics, series, s.duration_min))
    return Cohort(cohort.schema, tuple(surgeries))


def impute(cohort: Cohort, stats: NormalizationStats) -> Cohort:
    """Replace missing entries with the training mean, keeping the raw scale"""
    return _transform(cohort, stats, standardize=False)


def impute_and_standardize(cohort: Cohort, stats: NormalizationStats) -> Cohort:
    """Impute missing entries with the training mean, then map x -> (x - mean) / std"""
    return _transform(cohort, stats, standardize=True)


def _smoothing(alpha: float, dt: float) -> float:
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return -math.expm1(-alpha * dt)


def _as_series(series: Sequence[float]) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a non-empty 1-D series")
    return x


def ema(series: Sequence[float], alpha: float, dt: float = 1.0) -> np.ndarray:
    """
    Exponential moving average with rate alpha (per minute):
    beta = 1 - exp(-alpha * dt), y[0] = x[0], y[t] = (1 - beta) * y[t-1] + beta * x[t]
    """
    beta = _smoothing(alpha, dt)
    x = _as_series(series)
    y, _ = lfilter([beta], [1.0, beta - 1.0], x, zi=[(1.0 - beta) * x[0]])
    return y


def emv(series: Sequence[float], alpha: float, dt: float = 1.0) -> np.ndarray:
    """
    Incremental exponentially weighted variance:
    v[0] = 0, v[t] = (1 - beta) * (v[t-1] + beta * (x[t] - y[t-1])**2)
    """
    beta = _smoothing(alpha, dt)
    x = _as_series(series)
    y = ema(x, alpha, dt)
    sq = np.zeros_like(x)
    sq[1:] = (x[1:] - y[:-1]) ** 2
    v = lfilter([(1.0 - beta) * beta], [1.0, beta - 1.0], sq)
    return v


def label_hypoxemia(sao2: np.ma.MaskedArray, cfg: LabelConfig) -> np.ma.MaskedArray:
    """
    Label minute t with 1 if an observed SaO2 in (t, t + horizon] is below the
    threshold, 0 if the window holds observations and none is below. Masked
    (undefined) when the window is empty or runs past the surgery, or, with
    require_currently_normal, when SaO2 at t is observed below the threshold.
    """
    values = np.ma.getdata(sao2).astype(float)
    observed = ~np.ma.getmaskarray(sao2)
    below = observed & (values < cfg.threshold)
    n, h = values.size, cfg.horizon_min
    labels = np.zeros(n, dtype=np.int8)
    undefined = np.ones(n, dtype=bool)
    if n > h:
        c_obs = np.concatenate([[0], np.cumsum(observed)])
        c_below = np.concatenate([[0], np.cumsum(below)])
        t = np.arange(n - h)
        n_obs = c_obs[t + h + 1] - c_obs[t + 1]
        n_below = c_below[t + h + 1] - c_below[t + 1]
        labels[t] = (n_below > 0).astype(np.int8)
        undefined[t] = n_obs == 0
    if cfg.require_currently_normal:
        undefined |= below
    labels[undefined] = 0
    return np.ma.array(labels, mask=undefined, shrink=False)


def label_cohort(cohort: Cohort, cfg: LabelConfig) -> dict[str, np.ma.MaskedArray]:
    """Labels per surgery from the raw (pre-imputation) target channel"""
    target = cohort.schema.target
    return {s.surgery_id: label_hypoxemia(s.series[target], cfg) for s in cohort}


def sample_minutes(duration: int, labels: np.ma.MaskedArray | None, min_time: int = 0) -> np.ndarray:
    t = np.arange(duration)
    keep = t >= min_time
    if labels is not None:
        keep &= ~np.ma.getmaskarray(labels)
    return t[keep]


@dataclass(frozen=True)
class FeatureMatrix:
    columns: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray | None
    surgery_ids: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        values = np.asarray(self.values, dtype=float).reshape(len(self.times), len(self.columns))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "surgery_ids", np.asarray(self.surgery_ids, dtype=object))
        object.__setattr__(self, "times", np.asarray(self.times, dtype=np.int64))
        if len(set(self.columns)) != len(self.columns):
            raise FeatureLayoutError("duplicate feature column names")
        if self.surgery_ids.shape != self.times.shape:
            raise FeatureLayoutError("provenance vectors differ in length")
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int8)
            if labels.shape != self.times.shape or np.any((labels != 0) & (labels != 1)):
                raise FeatureLayoutError("labels must be a 0/1 vector with one entry per row")
            object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return len(self.times)

    @property
    def provenance(self) -> list[tuple[str, int]]:
        return list(zip(self.surgery_ids.tolist(), self.times.tolist()))

    def _index(self, columns: Iterable[str]) -> list[int]:
        lookup = {c: i for i, c in enumerate(self.columns)}
        unknown = [c for c in columns if c not in lookup]
        if unknown:
            raise FeatureLayoutError(f"unknown feature columns: {', '.join(unknown)}")
        return [lookup[c] for c in columns]

    def select(self, columns: Sequence[str]) -> "FeatureMatrix":
        idx = self._index(columns)
        return replace(self, columns=tuple(columns), values=self.values[:, idx])

    def drop(self, columns: Iterable[str]) -> "FeatureMatrix":
        dropped = set(columns)
        self._index(dropped)
        return self.select([c for c in self.columns if c not in dropped])

    def hstack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        if not (np.array_equal(self.times, other.times) and np.array_equal(self.surgery_ids, other.surgery_ids)):
            raise FeatureLayoutError("cannot stack feature matrices with different provenance")
        return replace(
            self,
            columns=self.columns + other.columns,
            values=np.hstack([self.values, other.values]),
        )

    def with_columns(self, columns: Sequence[str], values: np.ndarray) -> "FeatureMatrix":
        extra = FeatureMatrix(tuple(columns), values, None, self.surgery_ids, self.times)
        return self.hstack(extra)

    def take(self, rows: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(
            self.columns,
            self.values[rows],
            None if self.labels is None else self.labels[rows],
            self.surgery_ids[rows],
            self.times[rows],
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.columns))
        frame.insert(0, "time_min", self.times)
        frame.insert(0, "surgery_id", self.surgery_ids)
        if self.labels is not None:
            frame["label"] = self.labels
        return frame

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureMatrix":
        frame = pd.read_csv(path, dtype={"surgery_id": str})
        columns = [c for c in frame.columns if c not in ("surgery_id", "time_min", "label")]
        labels = frame["label"].to_numpy() if "label" in frame.columns else None
        return cls(
            tuple(columns),
            frame[columns].to_numpy(dtype=float),
            labels,
            frame["surgery_id"].to_numpy(dtype=object),
            frame["time_min"].to_numpy(),
        )


@dataclass(frozen=True)
class WindowTensor:
    """Windows shaped (sample, lag, channel); lag 0 is the oldest minute, lag L-1 the current one"""

    windows: np.ndarray
    lookback: int
    channels: tuple[str, ...]
    labels: np.ndarray | None
    surgery_ids: np.ndarray
    times: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.windows.shape[0]


def processed_columns(channel: str, ema_cfg: EmaConfig) -> list[str]:
    return (
        [f"{channel}__raw"]
        + [f"{channel}__ema_{a:g}" for a in ema_cfg.alphas_ema]
        + [f"{channel}__emv_{ema_cfg.alpha_emv:g}"]
    )


def static_column(name: str) -> str:
    return f"{name}__static"


def _ordered(cohort: Cohort) -> list[SurgeryRecord]:
    return sorted(cohort, key=lambda s: s.surgery_id)


def _check_channels(cohort: Cohort, channels: Iterable[str]) -> list[str]:
    channels = list(channels)
    unknown = [c for c in channels if c not in cohort.schema.time_series]
    if unknown:
        raise FeatureLayoutError(f"unknown time series channels: {', '.join(unknown)}")
    # keep schema order so column layouts do not depend on set iteration
    return [c for c in cohort.schema.time_series if c in channels]


def build_processed_features(
    cohort: Cohort,
    ema_cfg: EmaConfig,
    include_channels: Iterable[str],
    include_statics: bool,
    labels: Mapping[str, np.ma.MaskedArray] | None = None,
    min_time: int = 0,
) -> FeatureMatrix:
    """
    Per included channel emit raw, one EMA per alpha and the EMV; append
    statics once per row. Rows are (surgery, minute) pairs with a defined
    label (every minute when labels is None) ordered by (surgery_id, time_min).
    """
    channels = _check_channels(cohort, include_channels)
    statics = list(cohort.schema.statics) if include_statics else []
    columns = [col for ch in channels for col in processed_columns(ch, ema_cfg)]
    columns += [static_column(s) for s in statics]

    blocks, label_parts, ids, times = [], [], [], []
    for s in _ordered(cohort):
        surgery_labels = None if labels is None else labels[s.surgery_id]
        minutes = sample_minutes(s.duration_min, surgery_labels, min_time)
        if not minutes.size:
            continue
        cols = []
        for ch in channels:
            if np.ma.getmaskarray(s.series[ch]).any():
                raise FeatureLayoutError(f"surgery {s.surgery_id}: channel '{ch}' has missing values, impute first")
            x = np.ma.getdata(s.series[ch]).astype(float)
            cols.append(x)
            cols.extend(ema(x, a, ema_cfg.dt_min) for a in ema_cfg.alphas_ema)
            cols.append(emv(x, ema_cfg.alpha_emv, ema_cfg.dt_min))
        for name in statics:
            if s.statics[name] is None:
                raise FeatureLayoutError(f"surgery {s.surgery_id}: static '{name}' is missing, impute first")
            cols.append(np.full(s.duration_min, s.statics[name]))
        block = np.column_stack(cols) if cols else np.empty((s.duration_min, 0))
        blocks.append(block[minutes])
        if surgery_labels is not None:
            label_parts.append(np.ma.getdata(surgery_labels)[minutes])
        ids.extend([s.surgery_id] * minutes.size)
        times.append(minutes)

    values = np.vstack(blocks) if blocks else np.empty((0, len(columns)))
    return FeatureMatrix(
        tuple(columns),
        values,
        None if labels is None else (np.concatenate(label_parts) if label_parts else np.empty(0, np.int8)),
        np.array(ids, dtype=object),
        np.concatenate(times) if times else np.empty(0, np.int64),
    )


def fit_column_stats(matrix: FeatureMatrix) -> NormalizationStats:
    means = matrix.values.mean(axis=0) if matrix.n_rows else np.zeros(len(matrix.columns))
    stds = matrix.values.std(axis=0) if matrix.n_rows else np.ones(len(matrix.columns))
    return NormalizationStats(dict(zip(matrix.columns, means.tolist())), dict(zip(matrix.columns, stds.tolist())))


def standardize_columns(matrix: FeatureMatrix, stats: NormalizationStats) -> FeatureMatrix:
    """Scale the columns the stats cover; the rest (statics, lags, LSTM features) pass through"""
    covered = [c in stats for c in matrix.columns]
    mean = np.array([stats.means[c] if hit else 0.0 for c, hit in zip(matrix.columns, covered)])
    std = np.array([max(stats.stds[c], STD_FLOOR) if hit else 1.0 for c, hit in zip(matrix.columns, covered)])
    return replace(matrix, values=(matrix.values - mean) / std)


def window_samples(
    cohort: Cohort,
    channels: Iterable[str],
    lookback: int,
    labels: Mapping[str, np.ma.MaskedArray] | None = None,
    min_time: int = 0,
) -> WindowTensor:
    """One window of minutes t-L+1..t per (surgery, t) with a defined label and t >= L-1"""
    if lookback < 1:
        raise ValueError(f"lookback must be >= 1, got {lookback}")
    channels = _check_channels(cohort, channels)
    start = max(lookback - 1, min_time)
    parts, label_parts, ids, times = [], [], [], []
    for s in _ordered(cohort):
        surgery_labels = None if labels is None else labels[s.surgery_id]
        minutes = sample_minutes(s.duration_min, surgery_labels, start)
        if not minutes.size:
            continue
        x = np.column_stack([np.ma.getdata(s.series[ch]).astype(float) for ch in channels])
        # view[k] covers minutes k..k+L-1, so the window ending at t is view[t-L+1]
        view = sliding_window_view(x, (lookback, len(channels)))[:, 0]
        parts.append(view[minutes - lookback + 1])
        if surgery_labels is not None:
            label_parts.append(np.ma.getdata(surgery_labels)[minutes])
        ids.extend([s.surgery_id] * minutes.size)
        times.append(minutes)
    windows = np.concatenate(parts) if parts else np.empty((0, lookback, len(channels)))
    return WindowTensor(
        windows=np.ascontiguousarray(windows),
        lookback=lookback,
        channels=tuple(channels),
        labels=None if labels is None else (np.concatenate(label_parts) if label_parts else np.empty(0, np.int8)),
        surgery_ids=np.array(ids, dtype=object),
        times=np.concatenate(times) if times else np.empty(0, np.int64),
    )


def lagged_features(
    cohort: Cohort,
    channel: str,
    lookback: int,
    labels: Mapping[str, np.ma.MaskedArray] | None = None,
    min_time: int = 0,
) -> FeatureMatrix:
    """Autoregressive design: the last `lookback` raw values of one channel, lag_0 = current minute"""
    tensor = window_samples(cohort, [channel], lookback, labels, min_time)
    columns = [f"{channel}__lag_{k}" for k in range(lookback - 1, -1, -1)]
    return FeatureMatrix(
        tuple(columns),
        tensor.windows[:, :, 0],
        tensor.labels,
        tensor.surgery_ids,
        tensor.times,
    )
