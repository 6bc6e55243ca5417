"""
Experiment configuration

Plain-text key=value files; dotted keys address nested sections, e.g.

    seed=7
    lstm.layer_sizes=32,32
    gbt.max_depth=6
    split.fractions=0.6,0.2,0.2

A section seed left unset is derived from the master seed.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .coerce import FloatTriple, IntList, StrList
from .errors import ConfigError
from .features import EmaConfig, LabelConfig
from .gbt import GBTConfig
from .lstm import LSTMConfig
from .synthgen import SynthConfig

ABLATION_MODELS = (1, 2, 3, 4, 5, 6, 7)
SEED_OFFSETS = {"split": 0, "synth": 1, "lstm": 2, "gbt": 3}


class SplitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fractions: FloatTriple = (0.6, 0.2, 0.2)
    seed: int = 0

    @field_validator("fractions")
    @classmethod
    def _fractions(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(f <= 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError("fractions must be three positive reals summing to 1")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset_path: str | None = None
    schema_path: str | None = None
    synth: SynthConfig = Field(default_factory=SynthConfig)
    split: SplitConfig = Field(default_factory=SplitConfig)
    ema: EmaConfig = Field(default_factory=EmaConfig)
    label: LabelConfig = Field(default_factory=LabelConfig)
    lookbacks: IntList = Field(default_factory=lambda: [30, 60])
    lstm_lookback: int = Field(default=60, ge=1)
    lstm: LSTMConfig = Field(default_factory=LSTMConfig)
    lstm_channels: StrList | None = None
    include_statics: bool = True
    gbt: GBTConfig = Field(default_factory=GBTConfig)
    ablation_models: IntList = Field(default_factory=lambda: list(ABLATION_MODELS))
    output_dir: str = "runs/default"
    seed: int = 0

    @model_validator(mode="before")
    @classmethod
    def _derive_seeds(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        master = int(data.get("seed", 0) or 0)
        for section, offset in SEED_OFFSETS.items():
            value = data.get(section)
            if value is None:
                data[section] = {"seed": master + offset}
            elif isinstance(value, BaseModel):
                if "seed" not in value.model_fields_set:
                    data[section] = value.model_copy(update={"seed": master + offset})
            elif isinstance(value, dict) and "seed" not in value:
                data[section] = {**value, "seed": master + offset}
        return data

    @model_validator(mode="after")
    def _check(self) -> "ExperimentConfig":
        if not self.lookbacks or any(L < 1 for L in self.lookbacks):
            raise ValueError("lookbacks must be a non-empty list of positive integers")
        if len(set(self.lookbacks)) != len(self.lookbacks):
            raise ValueError("lookbacks must not repeat")
        if not self.ablation_models:
            raise ValueError("select at least one ablation model")
        unknown = sorted(set(self.ablation_models) - set(ABLATION_MODELS))
        if unknown:
            raise ValueError(f"unknown ablation models {unknown}; choose from 1-7")
        if self.lstm_channels is not None and not self.lstm_channels:
            raise ValueError("lstm_channels, when set, must name at least one channel")
        return self

    @property
    def min_time(self) -> int:
        """First minute every model can score, from the longest window in use"""
        return max([*self.lookbacks, self.lstm_lookback]) - 1

    def fingerprint(self) -> str:
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_text(self) -> str:
        lines = [f"{key}={_format(value)}" for key, value in _flatten(self.model_dump(mode="json"))]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: Mapping[str, str] | None = None) -> "ExperimentConfig":
        pairs = parse_pairs(text)
        pairs.update(overrides or {})
        try:
            return cls.model_validate(_nest(pairs))
        except ValidationError as e:
            problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
            raise ConfigError(f"invalid configuration: {problems}") from e

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, str] | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_text(text, overrides)


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        pairs[key] = value
    return pairs


def _nest(pairs: Mapping[str, str]) -> dict:
    data: dict = {}
    for key, value in pairs.items():
        head, _, rest = key.partition(".")
        parsed = None if value == "" else value
        if not rest:
            if isinstance(data.get(head), dict):
                raise ConfigError(f"key '{key}' conflicts with dotted keys under '{head}.'")
            data[head] = parsed
            continue
        section = data.setdefault(head, {})
        if not isinstance(section, dict):
            raise ConfigError(f"key '{key}' conflicts with '{head}'")
        if "." in rest:
            raise ConfigError(f"key '{key}' nests too deeply")
        section[rest] = parsed
    return data


def _flatten(data: Mapping, prefix: str = ""):
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, f"{name}.")
        else:
            yield name, value


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)
