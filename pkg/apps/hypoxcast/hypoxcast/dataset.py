"""
Cohort data model: channel schemas, surgeries with explicit missingness,
CSV loading/saving and surgery-level train/validation/test splits
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import IO, Iterable, Iterator, Literal, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import CohortFormatError, DataValidationError, SchemaError, SplitError

logger = logging.getLogger(__name__)

ChannelKind = Literal["time_series", "static"]
PARTITIONS = ("train", "validation", "test")


@dataclass(frozen=True)
class Channel:
    name: str
    kind: ChannelKind
    unit: str = ""


@dataclass(frozen=True)
class ChannelSchema:
    channels: tuple[Channel, ...]
    target: str

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        names = [c.name for c in self.channels]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate channel names: {', '.join(dupes)}")
        for c in self.channels:
            if c.kind not in ("time_series", "static"):
                raise SchemaError(f"channel '{c.name}' has unknown kind '{c.kind}'")
        if not self.time_series:
            raise SchemaError("schema needs at least one time_series channel")
        if self.target not in names:
            raise SchemaError(f"target channel '{self.target}' is not in the schema")
        if self.channel(self.target).kind != "time_series":
            raise SchemaError(f"target channel '{self.target}' must be a time_series channel")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    @property
    def time_series(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels if c.kind == "time_series")

    @property
    def statics(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels if c.kind == "static")

    def channel(self, name: str) -> Channel:
        for c in self.channels:
            if c.name == name:
                return c
        raise SchemaError(f"unknown channel '{name}'")

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "channels": [{"name": c.name, "kind": c.kind, "unit": c.unit} for c in self.channels],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ChannelSchema":
        return cls(
            channels=tuple(Channel(c["name"], c["kind"], c.get("unit", "")) for c in data["channels"]),
            target=data["target"],
        )


def load_schema(path: str | Path) -> ChannelSchema:
    """
    Parse a schema sidecar of key=value lines:
    channel.<name>.kind=time_series|static, channel.<name>.unit=<text>, target=<name>
    """
    kinds: dict[str, str] = {}
    units: dict[str, str] = {}
    target = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "target":
            target = value
            continue
        parts = key.split(".")
        if len(parts) != 3 or parts[0] != "channel" or parts[2] not in ("kind", "unit"):
            raise SchemaError(f"{path}:{lineno}: unknown key '{key}'")
        _, name, attr = parts
        if attr == "kind":
            kinds[name] = value
        else:
            units[name] = value
    if target is None:
        raise SchemaError(f"{path}: missing 'target=<channel>' line")
    for name in units:
        if name not in kinds:
            raise SchemaError(f"{path}: channel '{name}' has a unit but no kind")
    channels = tuple(Channel(name, kind, units.get(name, "")) for name, kind in kinds.items())
    return ChannelSchema(channels=channels, target=target)


def save_schema(schema: ChannelSchema, path: str | Path) -> None:
    lines = []
    for c in schema.channels:
        lines.append(f"channel.{c.name}.kind={c.kind}")
        if c.unit:
            lines.append(f"channel.{c.name}.unit={c.unit}")
    lines.append(f"target={schema.target}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def as_series(values: Iterable[float | None], present: Sequence[bool] | None = None) -> np.ma.MaskedArray:
    """Build a read-only masked series; None entries (or present=False) are missing"""
    values = list(values)
    if present is None:
        present = [v is not None for v in values]
    data = np.array([0.0 if v is None else float(v) for v in values], dtype=float)
    mask = ~np.asarray(present, dtype=bool)
    return _frozen(np.ma.array(data, mask=mask))


def _frozen(series: np.ma.MaskedArray) -> np.ma.MaskedArray:
    data = np.array(np.ma.getdata(series), dtype=float)
    mask = np.array(np.ma.getmaskarray(series), dtype=bool)
    data[mask] = 0.0
    data.setflags(write=False)
    return np.ma.array(data, mask=mask, shrink=False)


@dataclass(frozen=True)
class SurgeryRecord:
    surgery_id: str
    statics: Mapping[str, float | None]
    series: Mapping[str, np.ma.MaskedArray]
    duration_min: int

    def __post_init__(self):
        if self.duration_min < 0:
            raise CohortFormatError(f"surgery {self.surgery_id}: negative duration")
        frozen = {}
        for name, values in self.series.items():
            values = _frozen(values)
            if values.shape != (self.duration_min,):
                raise CohortFormatError(
                    f"surgery {self.surgery_id}: channel '{name}' has {values.size} values, expected {self.duration_min}"
                )
            frozen[name] = values
        statics = {k: (None if v is None else float(v)) for k, v in self.statics.items()}
        object.__setattr__(self, "series", MappingProxyType(frozen))
        object.__setattr__(self, "statics", MappingProxyType(statics))

    def values(self, name: str) -> np.ndarray:
        return np.ma.getdata(self.series[name])

    def present(self, name: str) -> np.ndarray:
        return ~np.ma.getmaskarray(self.series[name])


@dataclass(frozen=True)
class LoadReport:
    n_rows: int
    n_surgeries: int
    missing_cells: Mapping[str, int]
    unparseable_cells: Mapping[str, int]

    @property
    def total_missing(self) -> int:
        return sum(self.missing_cells.values())


@dataclass(frozen=True)
class Cohort:
    schema: ChannelSchema
    surgeries: tuple[SurgeryRecord, ...]
    load_report: LoadReport | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "surgeries", tuple(self.surgeries))
        seen = set()
        ts, st = set(self.schema.time_series), set(self.schema.statics)
        for s in self.surgeries:
            if s.surgery_id in seen:
                raise CohortFormatError(f"duplicate surgery_id '{s.surgery_id}'")
            seen.add(s.surgery_id)
            if set(s.series) != ts or set(s.statics) != st:
                raise CohortFormatError(f"surgery {s.surgery_id} does not conform to the channel schema")

    def __len__(self) -> int:
        return len(self.surgeries)

    def __iter__(self) -> Iterator[SurgeryRecord]:
        return iter(self.surgeries)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.surgery_id for s in self.surgeries)

    def by_id(self, surgery_id: str) -> SurgeryRecord:
        for s in self.surgeries:
            if s.surgery_id == surgery_id:
                return s
        raise KeyError(surgery_id)

    def subset(self, ids: Iterable[str]) -> "Cohort":
        wanted = set(ids)
        return Cohort(self.schema, tuple(s for s in self.surgeries if s.surgery_id in wanted))

    def sorted(self) -> "Cohort":
        return Cohort(self.schema, tuple(sorted(self.surgeries, key=lambda s: s.surgery_id)))


def load_cohort(source: str | Path | IO, schema: ChannelSchema) -> Cohort:
    """
    Load a cohort CSV (surgery_id,time_min,<channel...>). Empty cells are
    missing; unparseable numerics become missing and are counted in the
    cohort's load_report.
    """
    frame = pd.read_csv(source, dtype=str, keep_default_na=False, encoding="utf-8")
    frame.columns = [str(c).strip() for c in frame.columns]
    required = ["surgery_id", "time_min", *schema.names]
    missing_cols = [c for c in required if c not in frame.columns]
    if missing_cols:
        raise CohortFormatError(f"missing required columns: {', '.join(missing_cols)}")

    frame["surgery_id"] = frame["surgery_id"].str.strip()
    times = pd.to_numeric(frame["time_min"].str.strip(), errors="coerce")
    if times.isna().any() or (times % 1 != 0).any():
        raise CohortFormatError("time_min must be an integer minute index on every row")
    frame["time_min"] = times.astype(np.int64)

    dup = frame.duplicated(["surgery_id", "time_min"])
    if dup.any():
        row = frame.loc[dup].iloc[0]
        raise CohortFormatError(f"duplicate (surgery_id, time_min) row: ({row['surgery_id']}, {row['time_min']})")

    missing_cells = {name: 0 for name in schema.names}
    unparseable = {name: 0 for name in schema.names}
    for name in schema.names:
        raw = frame[name].str.strip()
        empty = raw == ""
        parsed = pd.to_numeric(raw.where(~empty), errors="coerce").astype(float)
        parsed[~np.isfinite(parsed)] = np.nan
        bad = (~empty) & parsed.isna()
        unparseable[name] = int(bad.sum())
        if schema.channel(name).kind == "time_series":
            missing_cells[name] = int(parsed.isna().sum())
        frame[name] = parsed

    surgeries = []
    for sid, group in frame.groupby("surgery_id", sort=False):
        group = group.sort_values("time_min")
        minutes = group["time_min"].to_numpy()
        if not np.array_equal(minutes, np.arange(len(minutes))):
            raise CohortFormatError(f"non-contiguous time index in surgery {sid}")
        series = {}
        for name in schema.time_series:
            values = group[name].to_numpy(dtype=float)
            series[name] = np.ma.array(np.nan_to_num(values), mask=np.isnan(values))
        statics = {}
        for name in schema.statics:
            values = group[name].to_numpy(dtype=float)
            observed = values[~np.isnan(values)]
            if observed.size and np.any(observed != observed[0]):
                raise CohortFormatError(f"static channel '{name}' varies within surgery {sid}")
            statics[name] = float(observed[0]) if observed.size else None
            missing_cells[name] += int(not observed.size)
        surgeries.append(SurgeryRecord(str(sid), statics, series, len(minutes)))

    report = LoadReport(
        n_rows=len(frame),
        n_surgeries=len(surgeries),
        missing_cells=MappingProxyType(missing_cells),
        unparseable_cells=MappingProxyType(unparseable),
    )
    logger.info(
        f"Loaded {report.n_surgeries} surgeries ({report.n_rows} rows), "
        f"{report.total_missing} missing cells, {sum(unparseable.values())} unparseable"
    )
    return Cohort(schema, tuple(surgeries), load_report=report)


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write a cohort CSV; statics are repeated on every row of their surgery"""
    frames = []
    for s in cohort:
        data = {"surgery_id": [s.surgery_id] * s.duration_min, "time_min": np.arange(s.duration_min)}
        for name in cohort.schema.names:
            if name in s.series:
                data[name] = np.ma.filled(s.series[name].astype(float), np.nan)
            else:
                value = s.statics[name]
                data[name] = np.full(s.duration_min, np.nan if value is None else value)
        frames.append(pd.DataFrame(data))
    columns = ["surgery_id", "time_min", *cohort.schema.names]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
    table[columns].to_csv(path, index=False, na_rep="", lineterminator="\n")


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    seed: int

    def __post_init__(self):
        parts = (self.train, self.validation, self.test)
        if any(a & b for i, a in enumerate(parts) for b in parts[i + 1:]):
            raise SplitError("split partitions overlap")

    def ids(self, partition: str) -> frozenset[str]:
        if partition not in PARTITIONS:
            raise SplitError(f"unknown partition '{partition}'")
        return getattr(self, partition)

    def partition_of(self, surgery_id: str) -> str:
        for name in PARTITIONS:
            if surgery_id in getattr(self, name):
                return name
        raise KeyError(surgery_id)

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def _partition_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    sizes = [int(math.floor(f * n + 0.5)) for f in fractions[:2]]
    sizes.append(n - sum(sizes))
    while min(sizes) < 1:
        sizes[sizes.index(min(sizes))] += 1
        sizes[sizes.index(max(sizes))] -= 1
    return sizes


def split_by_surgery(cohort: Cohort, fractions: Sequence[float], seed: int) -> SplitAssignment:
    """Deterministic surgery-level split; no surgery lands in two partitions"""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be three positive reals summing to 1, got {tuple(fractions)}")
    ids = sorted(cohort.ids)
    if len(ids) < 3:
        raise SplitError(f"need at least 3 surgeries to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = _partition_sizes(len(ids), fractions)
    assignment = SplitAssignment(
        train=frozenset(shuffled[:n_train]),
        validation=frozenset(shuffled[n_train:n_train + n_val]),
        test=frozenset(shuffled[n_train + n_val:]),
        seed=seed,
    )
    logger.info(f"Split {len(ids)} surgeries into train/validation/test = {assignment.sizes()} (seed {seed})")
    return assignment


@dataclass(frozen=True)
class ChannelSummary:
    name: str
    kind: ChannelKind
    count: int
    missing_fraction: float
    mean: float | None
    std: float | None

    @property
    def degenerate(self) -> bool:
        return self.count == 0


def _observed(cohort: Cohort, name: str) -> tuple[np.ndarray, int]:
    if cohort.schema.channel(name).kind == "static":
        values = [s.statics[name] for s in cohort]
        return np.array([v for v in values if v is not None], dtype=float), len(values)
    chunks = [np.ma.getdata(s.series[name])[~np.ma.getmaskarray(s.series[name])] for s in cohort]
    total = sum(s.duration_min for s in cohort)
    return (np.concatenate(chunks) if chunks else np.empty(0)), total


def cohort_stats(cohort: Cohort) -> dict[str, ChannelSummary]:
    """Per-channel count, missing fraction, mean and population std over observed values"""
    if not len(cohort):
        raise DataValidationError("cohort_stats needs a non-empty cohort")
    summary = {}
    for c in cohort.schema.channels:
        values, total = _observed(cohort, c.name)
        missing = (1.0 - values.size / total) if total else 1.0
        if values.size:
            mean, std = float(np.mean(values)), float(np.std(values))
        else:
            mean = std = None
            logger.warning(f"Channel '{c.name}' has no observed values")
        summary[c.name] = ChannelSummary(c.name, c.kind, int(values.size), missing, mean, std)
    return summary
