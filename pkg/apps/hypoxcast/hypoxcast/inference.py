"""
Feature recipes: everything needed to rebuild a model's inputs from a raw cohort
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from . import gbt, lstm
from .container import load_model
from .dataset import ChannelSchema, Cohort, SurgeryRecord
from .errors import FeatureLayoutError, ModelTypeError
from .features import (
    EmaConfig,
    FeatureMatrix,
    LabelConfig,
    NormalizationStats,
    WindowTensor,
    build_processed_features,
    impute,
    impute_and_standardize,
    lagged_features,
    standardize_columns,
    window_samples,
)

logger = logging.getLogger(__name__)

OUTPUT_COLUMN = "lstm__output"


def hidden_columns(n: int) -> list[str]:
    return [f"lstm__h{k}" for k in range(n)]


class LSTMRecipe(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: list[str]
    lookback: int = Field(ge=1)
    channel_stats: dict[str, dict[str, float]]
    channel_schema: dict
    label: LabelConfig = Field(default_factory=LabelConfig)
    min_time: int = Field(default=0, ge=0)


class LSTMSource(BaseModel):
    path: str
    kind: Literal["hidden", "output"] = "hidden"


class LaggedSource(BaseModel):
    channel: str
    lookback: int = Field(ge=1)


class GBTRecipe(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: list[str] = Field(default_factory=list)
    include_statics: bool = True
    ema: EmaConfig = Field(default_factory=EmaConfig)
    channel_stats: dict[str, dict[str, float]]
    column_stats: dict[str, dict[str, float]] | None = None
    lstm: LSTMSource | None = None
    lagged: LaggedSource | None = None
    channel_schema: dict
    label: LabelConfig = Field(default_factory=LabelConfig)
    min_time: int = Field(default=0, ge=0)
    columns: list[str] = Field(default_factory=list)


def conform(cohort: Cohort, schema: ChannelSchema) -> Cohort:
    """Restrict a cohort to a model's schema; channels the model needs must be present"""
    if cohort.schema == schema:
        return cohort
    absent = [n for n in schema.names if n not in cohort.schema.names]
    if absent:
        raise FeatureLayoutError(f"cohort lacks channels the model needs: {', '.join(absent)}")
    surgeries = [
        SurgeryRecord(
            s.surgery_id,
            {n: s.statics[n] for n in schema.statics},
            {n: s.series[n] for n in schema.time_series},
            s.duration_min,
        )
        for s in cohort
    ]
    return Cohort(schema, tuple(surgeries))


def _recipe_of(model, recipe_type):
    data = (model.metadata or {}).get("recipe")
    if data is None:
        raise FeatureLayoutError(f"{type(model).__name__} carries no feature recipe")
    return recipe_type.model_validate(data)


def lstm_windows(
    cohort: Cohort,
    model: lstm.LSTMModel,
    labels: Mapping[str, np.ma.MaskedArray] | None = None,
    min_time: int | None = None,
) -> WindowTensor:
    """Impute and standardize with the model's training stats, then cut its windows"""
    recipe = _recipe_of(model, LSTMRecipe)
    schema = ChannelSchema.from_dict(recipe.channel_schema)
    stats = NormalizationStats.from_dict(recipe.channel_stats)
    prepared = impute_and_standardize(conform(cohort, schema), stats)
    start = recipe.min_time if min_time is None else min_time
    return window_samples(prepared, recipe.channels, recipe.lookback, labels, start)


def _resolve(path: str, base_dir: Path | None) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base_dir is None else base_dir / p


def design_matrix(
    cohort: Cohort,
    recipe: GBTRecipe,
    labels: Mapping[str, np.ma.MaskedArray] | None = None,
    lstm_model: lstm.LSTMModel | None = None,
    base_dir: Path | None = None,
) -> FeatureMatrix:
    schema = ChannelSchema.from_dict(recipe.channel_schema)
    stats = NormalizationStats.from_dict(recipe.channel_stats)
    imputed = impute(conform(cohort, schema), stats)
    matrix = build_processed_features(imputed, recipe.ema, recipe.channels, recipe.include_statics, labels, recipe.min_time)
    if recipe.column_stats is not None:
        matrix = standardize_columns(matrix, NormalizationStats.from_dict(recipe.column_stats))
    if recipe.lagged is not None:
        matrix = matrix.hstack(
            lagged_features(imputed, recipe.lagged.channel, recipe.lagged.lookback, labels, recipe.min_time)
        )
    if recipe.lstm is not None:
        if lstm_model is None:
            lstm_model = load_model(_resolve(recipe.lstm.path, base_dir), "lstm")
        windows = lstm_windows(cohort, lstm_model, labels, recipe.min_time)
        if recipe.lstm.kind == "hidden":
            hidden = lstm.extract_hidden(lstm_model, windows)
            matrix = matrix.with_columns(hidden_columns(hidden.shape[1]), hidden)
        else:
            matrix = matrix.with_columns([OUTPUT_COLUMN], lstm.predict_proba(lstm_model, windows)[:, None])
    return matrix.select(recipe.columns) if recipe.columns else matrix


def model_schema(model: lstm.LSTMModel | gbt.GBTModel) -> ChannelSchema:
    recipe_type = LSTMRecipe if isinstance(model, lstm.LSTMModel) else GBTRecipe
    return ChannelSchema.from_dict(_recipe_of(model, recipe_type).channel_schema)


def score_cohort(model_path: str | Path, cohort: Cohort) -> pd.DataFrame:
    """Probability for every scorable minute of every surgery; labels are not needed"""
    model_path = Path(model_path)
    return score_model(load_model(model_path), cohort, model_path.parent)


def score_model(model: lstm.LSTMModel | gbt.GBTModel, cohort: Cohort, base_dir: Path | None = None) -> pd.DataFrame:
    if isinstance(model, lstm.LSTMModel):
        windows = lstm_windows(cohort, model)
        probability = lstm.predict_proba(model, windows)
        ids, times = windows.surgery_ids, windows.times
    elif isinstance(model, gbt.GBTModel):
        recipe = _recipe_of(model, GBTRecipe)
        matrix = design_matrix(cohort, recipe, base_dir=base_dir)
        probability = gbt.predict_proba(model, matrix)
        ids, times = matrix.surgery_ids, matrix.times
    else:
        raise ModelTypeError(f"cannot score with {type(model).__name__}")
    logger.info(f"Scored {probability.size} minutes with a {type(model).__name__}")
    return pd.DataFrame({"surgery_id": ids, "time_min": times, "probability": probability})
