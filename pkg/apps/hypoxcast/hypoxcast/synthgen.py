"""
Synthetic surgical cohorts with planted structure

SaO2 is a bounded mean-reverting process near 97 with occasional multi-minute
desaturation episodes. The onset hazard rises with static risk covariates and
with an oscillatory precursor that shows up in SaO2 and ETCO2 a fixed lag
before most episodes. Heart rate ramps up over the last minutes before onset.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.signal import lfilter

from .coerce import FloatList, FloatPair, IntPair
from .dataset import Channel, ChannelSchema, Cohort, SurgeryRecord, save_cohort, save_schema
from .features import LabelConfig, label_cohort

logger = logging.getLogger(__name__)

TARGET = "sao2"
PRECURSOR_PERIOD_MIN = 3.0
RAMP_MIN = 10
HAZARD_CAP = 0.05
SAO2_NORMAL_RANGE = (92.5, 100.0)
SAO2_BASELINE_RANGE = (93.0, 100.0)

# name: (mean, reversion, volatility, noise scale, unit)
AUX_CHANNELS: dict[str, tuple[float, float, float, float, str]] = {
    "etco2": (38.0, 0.15, 0.8, 0.5, "mmHg"),
    "heart_rate": (75.0, 0.1, 1.5, 1.0, "bpm"),
    "mean_bp": (80.0, 0.08, 1.5, 1.0, "mmHg"),
    "resp_rate": (14.0, 0.2, 0.5, 0.3, "1/min"),
    "temperature": (36.8, 0.05, 0.03, 0.02, "degC"),
}

# name: (mean, std, lower, upper, unit)
STATICS: dict[str, tuple[float, float, float, float, str]] = {
    "age": (60.0, 15.0, 18.0, 95.0, "years"),
    "weight": (80.0, 15.0, 40.0, 160.0, "kg"),
    "height": (170.0, 10.0, 140.0, 205.0, "cm"),
    "asa": (2.5, math.sqrt(1.25), 1.0, 4.0, ""),
}


class SynthConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_surgeries: int = Field(default=200, ge=3)
    duration_range: IntPair = (120, 240)
    n_extra_channels: int = Field(default=5, ge=0)
    n_statics: int = Field(default=4, ge=0)
    precursor_lag_min: int = 45
    precursor_strength: float = Field(default=1.5, ge=0.0)
    precursor_duration_min: int = Field(default=6, ge=1)
    precursor_follow_prob: float = Field(default=0.9, gt=0.0, le=1.0)
    baseline_event_rate: float = Field(default=0.004, ge=0.0, lt=HAZARD_CAP)
    heralded_fraction: float = Field(default=0.75, ge=0.0, le=1.0)
    static_risk_weights: FloatList = Field(default_factory=lambda: [1.0, 0.6, 0.0, 1.0])
    episode_length_range: IntPair = (3, 8)
    nadir_range: FloatPair = (80.0, 90.0)
    refractory_min: int = Field(default=15, ge=0)
    heart_rate_ramp: float = Field(default=8.0, ge=0.0)
    missing_rate: float = Field(default=0.02, ge=0.0, lt=1.0)
    noise_std: float = Field(default=0.3, ge=0.0)
    sao2_mean: float = 97.0
    sao2_reversion: float = Field(default=0.1, gt=0.0, lt=1.0)
    sao2_volatility: float = Field(default=0.35, ge=0.0)
    label_rate_band: FloatPair = (0.01, 0.02)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SynthConfig":
        if not 30 < self.precursor_lag_min <= 60:
            raise ValueError("precursor_lag_min must be in (30, 60]")
        lo, hi = self.duration_range
        if lo < 1 or hi < lo:
            raise ValueError("duration_range must be 1 <= min <= max")
        if self.episode_length_range[0] < 1 or self.episode_length_range[1] < self.episode_length_range[0]:
            raise ValueError("episode_length_range must be 1 <= min <= max")
        if not 50.0 <= self.nadir_range[0] <= self.nadir_range[1] < 92.0:
            raise ValueError("nadir_range must lie within [50, 92)")
        if not 0.0 <= self.label_rate_band[0] < self.label_rate_band[1] <= 1.0:
            raise ValueError("label_rate_band must be an increasing pair in [0, 1]")
        return self

    @property
    def risk_weights(self) -> np.ndarray:
        w = np.zeros(self.n_statics)
        k = min(self.n_statics, len(self.static_risk_weights))
        w[:k] = self.static_risk_weights[:k]
        return w


def channel_names(cfg: SynthConfig) -> list[str]:
    aux = list(AUX_CHANNELS)[: cfg.n_extra_channels]
    aux += [f"aux_{k}" for k in range(cfg.n_extra_channels - len(aux))]
    return [TARGET, *aux]


def static_names(cfg: SynthConfig) -> list[str]:
    names = list(STATICS)[: cfg.n_statics]
    return names + [f"static_{k}" for k in range(cfg.n_statics - len(names))]


def synth_schema(cfg: SynthConfig) -> ChannelSchema:
    channels = [Channel(TARGET, "time_series", "%")]
    channels += [Channel(n, "time_series", AUX_CHANNELS.get(n, (0, 0, 0, 0, ""))[4]) for n in channel_names(cfg)[1:]]
    channels += [Channel(n, "static", STATICS.get(n, (0, 0, 0, 0, ""))[4]) for n in static_names(cfg)]
    return ChannelSchema(tuple(channels), TARGET)


@dataclass(frozen=True)
class Episode:
    onset: int
    length: int
    heralded: bool

    @property
    def end(self) -> int:
        return self.onset + self.length


@dataclass(frozen=True)
class GroundTruth:
    """Per-minute onset probability and the episodes actually placed"""

    event_probability: Mapping[str, np.ndarray]
    episodes: Mapping[str, tuple[Episode, ...]]
    precursors: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def onsets(self) -> dict[str, list[int]]:
        return {sid: [e.onset for e in eps] for sid, eps in self.episodes.items()}

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for sid in sorted(self.event_probability):
            p = self.event_probability[sid]
            onset = np.zeros(p.size, dtype=np.int8)
            episode = np.zeros(p.size, dtype=np.int8)
            for e in self.episodes[sid]:
                onset[e.onset] = 1
                episode[e.onset:e.end] = 1
            frames.append(
                pd.DataFrame(
                    {
                        "surgery_id": sid,
                        "time_min": np.arange(p.size),
                        "event_probability": p,
                        "onset": onset,
                        "in_episode": episode,
                    }
                )
            )
        return pd.concat(frames, ignore_index=True)


def _ou(rng: np.random.Generator, n: int, mean: float, reversion: float, volatility: float) -> np.ndarray:
    """Discretized Ornstein-Uhlenbeck path started from its stationary law"""
    stationary = volatility / math.sqrt(max(2.0 * reversion - reversion ** 2, 1e-12))
    shocks = volatility * rng.standard_normal(n)
    shocks[0] = stationary * rng.standard_normal()
    return mean + lfilter([1.0], [1.0, reversion - 1.0], shocks)


def _precursor_wave(cfg: SynthConfig) -> np.ndarray:
    k = np.arange(cfg.precursor_duration_min)
    return np.sin(2.0 * np.pi * (k + 0.25) / PRECURSOR_PERIOD_MIN)


def _draw_statics(cfg: SynthConfig, rng: np.random.Generator) -> tuple[dict[str, float], np.ndarray]:
    values, z = {}, np.zeros(cfg.n_statics)
    for j, name in enumerate(static_names(cfg)):
        if name == "asa":
            value = float(rng.integers(1, 5))
        elif name in STATICS:
            mean, std, lo, hi, _ = STATICS[name]
            value = float(np.clip(rng.normal(mean, std), lo, hi))
        else:
            value = float(rng.standard_normal())
        mean, std = STATICS[name][:2] if name in STATICS else (0.0, 1.0)
        values[name] = round(value, 1)
        z[j] = (value - mean) / std
    return values, z


def _place_episodes(cfg: SynthConfig, rng: np.random.Generator, duration: int, risk: float):
    """Sample precursor starts, then walk minutes drawing onsets from the resulting hazard"""
    lag = cfg.precursor_lag_min
    base = min(cfg.baseline_event_rate * risk, HAZARD_CAP)
    unheralded = base * (1.0 - cfg.heralded_fraction)
    precursor_rate = min(base * cfg.heralded_fraction / cfg.precursor_follow_prob, HAZARD_CAP)

    last_start = duration - cfg.precursor_duration_min
    starts = np.flatnonzero(rng.random(max(last_start + 1, 0)) < precursor_rate)
    heralded_at = np.zeros(duration, dtype=bool)
    targets = starts + lag
    heralded_at[targets[targets < duration]] = True

    hazard = 1.0 - (1.0 - unheralded) * (1.0 - cfg.precursor_follow_prob * heralded_at)
    hazard[0] = 0.0
    draws = rng.random(duration)
    lengths = rng.integers(cfg.episode_length_range[0], cfg.episode_length_range[1] + 1, size=duration)
    episodes, blocked_until = [], 0
    for t in range(1, duration):
        if t < blocked_until or draws[t] >= hazard[t]:
            continue
        length = int(min(lengths[t], duration - t))
        episodes.append(Episode(t, length, bool(heralded_at[t])))
        blocked_until = t + length + cfg.refractory_min
    return hazard, tuple(episodes), tuple(int(s) for s in starts)


def _surgery(cfg: SynthConfig, sid: str, rng: np.random.Generator, aux: list[str]):
    lo, hi = cfg.duration_range
    duration = int(rng.integers(lo, hi + 1))
    statics, z = _draw_statics(cfg, rng)
    w = cfg.risk_weights
    risk = math.exp(float(w @ z) - 0.5 * float(w @ w))
    hazard, episodes, starts = _place_episodes(cfg, rng, duration, risk)

    wave = cfg.precursor_strength * _precursor_wave(cfg)
    precursor = np.zeros(duration)
    for s in starts:
        precursor[s:s + wave.size] += wave[: duration - s]

    baseline = np.clip(
        _ou(rng, duration, cfg.sao2_mean, cfg.sao2_reversion, cfg.sao2_volatility), *SAO2_BASELINE_RANGE
    )
    sao2 = np.clip(baseline + cfg.noise_std * rng.standard_normal(duration) + precursor, *SAO2_NORMAL_RANGE)
    ramp = np.zeros(duration)
    for e in episodes:
        nadir = rng.uniform(*cfg.nadir_range)
        k = np.arange(e.length)
        dip = nadir + (91.5 - nadir) * (1.0 - np.sin(np.pi * (k + 0.5) / e.length))
        sao2[e.onset:e.end] = np.minimum(dip, 91.9)
        lead = np.arange(max(e.onset - RAMP_MIN, 0), e.onset)
        ramp[lead] = np.maximum(ramp[lead], cfg.heart_rate_ramp * (lead - e.onset + RAMP_MIN + 1) / RAMP_MIN)

    series = {TARGET: sao2}
    for name in aux:
        mean, reversion, volatility, noise, _ = AUX_CHANNELS.get(name, (0.0, 0.1, 0.3, 0.3, ""))
        x = _ou(rng, duration, mean, reversion, volatility) + noise * rng.standard_normal(duration)
        if name == "etco2":
            x = x + precursor
        elif name == "heart_rate":
            x = x + ramp
        series[name] = x

    masked = {}
    for name, x in series.items():
        missing = rng.random(duration) < cfg.missing_rate
        masked[name] = np.ma.array(np.round(x, 2), mask=missing)
    record = SurgeryRecord(sid, statics, masked, duration)
    return record, hazard, episodes, starts


def generate(cfg: SynthConfig) -> tuple[Cohort, GroundTruth]:
    """One independent seed stream per surgery, spawned from cfg.seed"""
    aux = channel_names(cfg)[1:]
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_surgeries)
    width = max(4, len(str(cfg.n_surgeries - 1)))
    surgeries, probs, episodes, precursors = [], {}, {}, {}
    for k, stream in enumerate(streams):
        sid = f"S{k:0{width}d}"
        record, hazard, eps, starts = _surgery(cfg, sid, np.random.default_rng(stream), aux)
        surgeries.append(record)
        probs[sid], episodes[sid], precursors[sid] = hazard, eps, starts
    cohort = Cohort(synth_schema(cfg), tuple(surgeries))
    n_episodes = sum(len(e) for e in episodes.values())
    logger.info(f"Generated {cfg.n_surgeries} surgeries with {n_episodes} desaturation episodes (seed {cfg.seed})")
    return cohort, GroundTruth(probs, episodes, precursors)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    expected: str


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def flags(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.__dict__ for c in self.checks], columns=["name", "passed", "value", "expected"])


def validate_cohort(cohort: Cohort, cfg: SynthConfig, label_cfg: LabelConfig | None = None) -> ValidationReport:
    """Check SaO2 bounds, the positive label rate band and per-channel missing rates"""
    label_cfg = label_cfg or LabelConfig()
    checks = []
    target = cohort.schema.target
    observed = np.concatenate([s.values(target)[s.present(target)] for s in cohort])
    lo, hi = (float(observed.min()), float(observed.max())) if observed.size else (math.nan, math.nan)
    checks.append(CheckResult("SAO2_LOWER_BOUND", bool(lo >= 50.0), lo, ">= 50"))
    checks.append(CheckResult("SAO2_UPPER_BOUND", bool(hi <= 100.0), hi, "<= 100"))

    labels = label_cohort(cohort, label_cfg)
    defined = sum(int((~np.ma.getmaskarray(y)).sum()) for y in labels.values())
    positive = sum(int(np.ma.getdata(y).sum()) for y in labels.values())
    rate = positive / defined if defined else math.nan
    band_lo, band_hi = cfg.label_rate_band
    checks.append(CheckResult("LABEL_RATE", bool(band_lo <= rate <= band_hi), rate, f"[{band_lo:g}, {band_hi:g}]"))

    for name in cohort.schema.time_series:
        total = sum(s.duration_min for s in cohort)
        missing = sum(int((~s.present(name)).sum()) for s in cohort)
        frac = missing / total if total else math.nan
        ok = abs(frac - cfg.missing_rate) <= 0.01
        checks.append(CheckResult(f"MISSING_RATE_{name.upper()}", bool(ok), frac, f"{cfg.missing_rate:g} +- 0.01"))

    report = ValidationReport(tuple(checks))
    if report.flags:
        logger.warning(f"Synthetic cohort failed checks: {', '.join(report.flags)}")
    return report


def write_cohort_bundle(
    out_dir: str | Path, cohort: Cohort, ground_truth: GroundTruth | None = None, report: ValidationReport | None = None
) -> dict[str, Path]:
    """cohort.csv + schema.txt, plus ground_truth.csv and validation.csv when given"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"cohort": out / "cohort.csv", "schema": out / "schema.txt"}
    save_cohort(cohort, paths["cohort"])
    save_schema(cohort.schema, paths["schema"])
    if ground_truth is not None:
        paths["ground_truth"] = out / "ground_truth.csv"
        ground_truth.to_frame().to_csv(paths["ground_truth"], index=False, lineterminator="\n")
    if report is not None:
        paths["validation"] = out / "validation.csv"
        report.to_frame().to_csv(paths["validation"], index=False, lineterminator="\n")
    logger.info(f"Wrote cohort bundle to {out}")
    return paths
