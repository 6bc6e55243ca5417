"""
Experiment orchestration

A Workbench owns one run: it loads or generates the cohort, splits it by
surgery, fits normalization on the training partition and then trains and
evaluates models stage by stage. Every partition read is recorded with the
active stage so a run can prove the test partition was only touched while
evaluating.
"""
from __future__ import annotations

import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from time import perf_counter
from typing import Callable, Iterator

import numpy as np
import pandas as pd

from . import gbt, lstm
from .config import ExperimentConfig
from .container import load_model, save_model
from .dataset import PARTITIONS, ChannelSchema, Cohort, load_cohort, load_schema, split_by_surgery
from .errors import (
    ConfigError,
    DataValidationError,
    ModelTypeError,
    NoPositiveLabelsError,
    RunLockedError,
    StageError,
)
from .features import (
    FeatureMatrix,
    NormalizationStats,
    impute,
    impute_and_standardize,
    label_cohort,
    lagged_features,
    processed_columns,
    static_column,
    build_processed_features,
    fit_column_stats,
    fit_normalization,
    standardize_columns,
    window_samples,
)
from .inference import (
    OUTPUT_COLUMN,
    GBTRecipe,
    LaggedSource,
    LSTMRecipe,
    LSTMSource,
    design_matrix,
    hidden_columns,
    lstm_windows,
)
from .metrics import pr_auc
from .report import render_report
from .settings import settings
from .synthgen import generate

logger = logging.getLogger(__name__)

EVALUATE_STAGE = "evaluate"
LSTM_FILE = "lstm.tbst"

# model number: (processed channels, statics, lstm feature kind, description)
ABLATION_TABLE: dict[int, tuple[str, bool, str | None, str]] = {
    1: ("target", False, None, "processed target channel only"),
    2: ("all", True, None, "processed channels + statics"),
    3: ("none", False, "hidden", "LSTM hidden features only"),
    4: ("all", True, "output", "processed + statics + LSTM probability"),
    5: ("all", True, "hidden", "processed + statics + LSTM hidden features"),
    6: ("all_but_target", True, "output", "processed without target + statics + LSTM probability"),
    7: ("all_but_target", True, "hidden", "processed without target + statics + LSTM hidden features"),
}


@dataclass
class PartitionAudit:
    reads: list[tuple[str, str]] = field(default_factory=list)
    stage: str = "setup"

    def record(self, partition: str) -> None:
        self.reads.append((partition, self.stage))

    def stages_reading(self, partition: str) -> list[str]:
        return sorted({stage for p, stage in self.reads if p == partition})

    def violations(self) -> list[tuple[str, str]]:
        return [(p, s) for p, s in self.reads if p == "test" and s != EVALUATE_STAGE]


@dataclass(frozen=True)
class AblationResult:
    model: str
    val_pr_auc: float
    test_pr_auc: float
    train_seconds: float
    fingerprint: str
    n_features: int
    family: str | None = None
    lookback: int | None = None


@dataclass
class TrainedModel:
    name: str
    model: lstm.LSTMModel | gbt.GBTModel
    path: Path
    train_seconds: float
    val_pr_auc: float
    n_features: int
    recipe: GBTRecipe | None = None
    family: str | None = None
    lookback: int | None = None


@dataclass
class RunResult:
    kind: str
    out_dir: Path
    fingerprint: str
    results: list[AblationResult]
    audit: PartitionAudit
    top_channel: str | None = None
    importance: dict[str, float] = field(default_factory=dict)
    stage_seconds: dict[str, float] = field(default_factory=dict)

    def result(self, model: str) -> AblationResult:
        for r in self.results:
            if r.model == model:
                return r
        raise KeyError(model)

    def frame(self) -> pd.DataFrame:
        rows = []
        for r in self.results:
            rows.append({"model": r.model, "split": "validation", "pr_auc": r.val_pr_auc, "fingerprint": r.fingerprint})
            rows.append({"model": r.model, "split": "test", "pr_auc": r.test_pr_auc, "fingerprint": r.fingerprint})
        return pd.DataFrame(rows, columns=["model", "split", "pr_auc", "fingerprint"])

    def lookback_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.results:
            if r.lookback is None:
                continue
            for split, value in (("validation", r.val_pr_auc), ("test", r.test_pr_auc)):
                rows.append(
                    {"family": r.family, "lookback": r.lookback, "split": split, "pr_auc": value, "fingerprint": r.fingerprint}
                )
        return pd.DataFrame(rows, columns=["family", "lookback", "split", "pr_auc", "fingerprint"])


@contextmanager
def run_lock(out_dir: Path) -> Iterator[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / settings.RUN_LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"output directory {out_dir} is in use by another run (lock file {lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")


def _safe_pr_auc(scores: np.ndarray, labels: np.ndarray, what: str):
    try:
        return pr_auc(scores, labels)
    except NoPositiveLabelsError:
        logger.warning(f"No positive labels for {what}; PR-AUC recorded as NaN")
        return None, math.nan


class Workbench:
    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.output_dir)
        self.fingerprint = cfg.fingerprint()
        self.audit = PartitionAudit()
        self.models: dict[str, TrainedModel] = {}
        self.stage_seconds: dict[str, float] = {}
        self.top_channel: str | None = None
        self.importance: dict[str, float] = {}
        self.lstm_model: lstm.LSTMModel | None = None
        self.schema: ChannelSchema | None = None
        self._cohorts: dict[str, Cohort] = {}
        self._column_stats: NormalizationStats | None = None
        self._cache: dict[tuple, object] = {}

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        self.audit.stage = name
        logger.info(f"Stage '{name}' started")
        started = perf_counter()
        try:
            yield
        except (DataValidationError, StageError, RunLockedError):
            logger.error(f"Stage '{name}' failed")
            raise
        except Exception as e:
            logger.error(f"Stage '{name}' failed: {type(e).__name__}: {e}")
            raise StageError(name, e) from e
        elapsed = perf_counter() - started
        self.stage_seconds[name] = self.stage_seconds.get(name, 0.0) + elapsed
        logger.info(f"Stage '{name}' finished in {elapsed:.1f}s")

    # data access

    def _load_cohort(self) -> Cohort:
        cfg = self.cfg
        if cfg.dataset_path is None:
            cohort, _ = generate(cfg.synth)
            return cohort
        schema_path = cfg.schema_path or str(Path(cfg.dataset_path).with_name("schema.txt"))
        return load_cohort(cfg.dataset_path, load_schema(schema_path))

    def prepare(self) -> None:
        with self.stage("prepare"):
            cohort = self._load_cohort()
            self.schema = cohort.schema
            unknown = [c for c in (self.cfg.lstm_channels or []) if c not in cohort.schema.time_series]
            if unknown:
                raise ConfigError(f"lstm_channels not in the cohort's time series: {', '.join(unknown)}")
            self.split = split_by_surgery(cohort, self.cfg.split.fractions, self.cfg.split.seed)
            self._cohorts = {p: cohort.subset(self.split.ids(p)) for p in PARTITIONS}
            self.stats = fit_normalization(self.partition("train"))
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "config.txt").write_text(self.cfg.to_text(), encoding="utf-8")
            assignment = pd.DataFrame(
                [(sid, p) for p in PARTITIONS for sid in sorted(self.split.ids(p))], columns=["surgery_id", "partition"]
            )
            _write_csv(assignment, self.out / "split.csv")

    def partition(self, name: str) -> Cohort:
        self.audit.record(name)
        return self._cohorts[name]

    def _cached(self, key: tuple, build: Callable[[], object]):
        if key[-1] in PARTITIONS:
            self.audit.record(key[-1])
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def labels(self, part: str) -> dict[str, np.ma.MaskedArray]:
        return self._cached(("labels", part), lambda: label_cohort(self.partition(part), self.cfg.label))

    def imputed(self, part: str) -> Cohort:
        return self._cached(("imputed", part), lambda: impute(self.partition(part), self.stats))

    def standardized(self, part: str) -> Cohort:
        return self._cached(("standardized", part), lambda: impute_and_standardize(self.partition(part), self.stats))

    def _raw_processed(self, part: str) -> FeatureMatrix:
        return self._cached(
            ("raw_processed", part),
            lambda: build_processed_features(
                self.imputed(part),
                self.cfg.ema,
                self.schema.time_series,
                True,
                self.labels(part),
                self.cfg.min_time,
            ),
        )

    @property
    def column_stats(self) -> NormalizationStats:
        """Mean/std of every derived time-series column over the train rows"""
        if self._column_stats is None:
            derived = [col for ch in self.schema.time_series for col in processed_columns(ch, self.cfg.ema)]
            self._column_stats = fit_column_stats(self._raw_processed("train").select(derived))
        return self._column_stats

    def processed(self, part: str) -> FeatureMatrix:
        return self._cached(
            ("processed", part), lambda: standardize_columns(self._raw_processed(part), self.column_stats)
        )

    def windows(self, part: str, channels, lookback: int):
        return window_samples(self.standardized(part), channels, lookback, self.labels(part), self.cfg.min_time)

    def lstm_features(self, part: str) -> FeatureMatrix:
        """Hidden states and output probability of the run's LSTM, one row per aligned sample"""

        def build() -> FeatureMatrix:
            model = self.lstm_model
            tensor = self.windows(part, model.channels, model.lookback)
            hidden = lstm.extract_hidden(model, tensor)
            prob = lstm.predict_proba(model, tensor)
            n2 = model.params.hidden_dim
            if hidden.shape[1] != n2:
                raise ValueError(f"hidden feature width {hidden.shape[1]} != {n2}")
            return FeatureMatrix(
                tuple(hidden_columns(n2)) + (OUTPUT_COLUMN,),
                np.column_stack([hidden, prob]),
                None,
                tensor.surgery_ids,
                tensor.times,
            )

        return self._cached(("lstm_features", id(self.lstm_model), part), build)

    def design(self, recipe: GBTRecipe, part: str) -> FeatureMatrix:
        matrix = self.processed(part)
        if recipe.lagged is not None:
            matrix = matrix.hstack(
                lagged_features(
                    self.imputed(part), recipe.lagged.channel, recipe.lagged.lookback, self.labels(part), self.cfg.min_time
                )
            )
        if recipe.lstm is not None:
            matrix = matrix.hstack(self.lstm_features(part))
        return matrix.select(recipe.columns)

    # recipes

    def make_recipe(
        self,
        channels: list[str],
        include_statics: bool,
        lstm_kind: str | None = None,
        lagged: LaggedSource | None = None,
    ) -> GBTRecipe:
        schema = self.schema
        channels = [c for c in schema.time_series if c in channels]
        columns = [col for ch in channels for col in processed_columns(ch, self.cfg.ema)]
        if include_statics:
            columns += [static_column(s) for s in schema.statics]
        if lagged is not None:
            columns += [f"{lagged.channel}__lag_{k}" for k in range(lagged.lookback - 1, -1, -1)]
        if lstm_kind == "hidden":
            columns += hidden_columns(self.lstm_model.params.hidden_dim)
        elif lstm_kind == "output":
            columns.append(OUTPUT_COLUMN)
        if not columns:
            raise ConfigError("model would have no feature columns")
        return GBTRecipe(
            channels=channels,
            include_statics=include_statics,
            ema=self.cfg.ema,
            channel_stats=self.stats.to_dict(),
            column_stats=self.column_stats.subset(columns).to_dict(),
            lstm=None if lstm_kind is None else LSTMSource(path=LSTM_FILE, kind=lstm_kind),
            lagged=lagged,
            channel_schema=schema.to_dict(),
            label=self.cfg.label,
            min_time=self.cfg.min_time,
            columns=columns,
        )

    def ablation_recipe(self, number: int) -> GBTRecipe:
        rule, statics, kind, _ = ABLATION_TABLE[number]
        target = self.schema.target
        channels = {
            "target": [target],
            "all": list(self.schema.time_series),
            "all_but_target": [c for c in self.schema.time_series if c != target],
            "none": [],
        }[rule]
        return self.make_recipe(channels, statics and self.cfg.include_statics, kind)

    # training

    def _register(self, trained: TrainedModel, val_ids, val_times, val_labels, val_scores) -> TrainedModel:
        save_model(trained.path, trained.model)
        _write_csv(
            pd.DataFrame(
                {"surgery_id": val_ids, "time_min": val_times, "label": val_labels, "probability": val_scores}
            ),
            self.out / "scores" / f"{trained.name}_validation.csv",
        )
        self.models[trained.name] = trained
        logger.info(f"{trained.name}: validation PR-AUC {trained.val_pr_auc:.5f} ({trained.train_seconds:.1f}s)")
        return trained

    def fit_gbt(self, name: str, recipe: GBTRecipe, family: str | None = None, lookback: int | None = None) -> TrainedModel:
        train_m, val_m = self.design(recipe, "train"), self.design(recipe, "validation")
        started = perf_counter()
        model, report = gbt.train(train_m, val_m, self.cfg.gbt)
        seconds = perf_counter() - started
        model.metadata["recipe"] = recipe.model_dump(mode="json")
        _write_csv(report.to_frame(), self.out / "training" / f"{name}.csv")
        scores = gbt.predict_proba(model, val_m)
        _, auc = _safe_pr_auc(scores, val_m.labels, f"{name} validation")
        trained = TrainedModel(
            name, model, self.out / "models" / f"{name}.tbst", seconds, auc, len(recipe.columns), recipe, family, lookback
        )
        return self._register(trained, val_m.surgery_ids, val_m.times, val_m.labels, scores)

    def fit_lstm(self, name: str, channels: list[str], lookback: int, family: str | None = None) -> TrainedModel:
        lstm_cfg = self.cfg.lstm.model_copy(update={"input_dim": len(channels)})
        train_w = self.windows("train", channels, lookback)
        val_w = self.windows("validation", channels, lookback)
        started = perf_counter()
        model, report = lstm.train(train_w, val_w, lstm_cfg)
        seconds = perf_counter() - started
        model.metadata["recipe"] = LSTMRecipe(
            channels=list(model.channels),
            lookback=lookback,
            channel_stats=self.stats.to_dict(),
            channel_schema=self.schema.to_dict(),
            label=self.cfg.label,
            min_time=self.cfg.min_time,
        ).model_dump(mode="json")
        _write_csv(report.to_frame(), self.out / "training" / f"{name}.csv")
        scores = lstm.predict_proba(model, val_w)
        _, auc = _safe_pr_auc(scores, val_w.labels, f"{name} validation")
        n_features = lookback * len(model.channels)
        lb = lookback if family else None
        trained = TrainedModel(name, model, self.out / "models" / f"{name}.tbst", seconds, auc, n_features, None, family, lb)
        return self._register(trained, val_w.surgery_ids, val_w.times, val_w.labels, scores)

    # methodology steps

    def baseline(self) -> TrainedModel:
        with self.stage("baseline_gbt"):
            return self.fit_gbt("M2", self.ablation_recipe(2))

    def rank_features(self) -> str:
        """The time-series channel whose derived columns carry the most total gain"""
        with self.stage("rank_features"):
            self.importance = gbt.feature_importance(self.models["M2"].model)
            by_channel = {
                ch: sum(self.importance.get(col, 0.0) for col in processed_columns(ch, self.cfg.ema))
                for ch in self.schema.time_series
            }
            self.top_channel = max(self.schema.time_series, key=lambda ch: by_channel[ch])
            ranked = sorted(self.importance.items(), key=lambda kv: (-kv[1], kv[0]))
            _write_csv(pd.DataFrame(ranked, columns=["feature", "gain"]), self.out / "importance.csv")
            logger.info(f"Top channel by gain importance: {self.top_channel}")
            return self.top_channel

    def train_lstm(self) -> TrainedModel:
        with self.stage("lstm"):
            channels = list(self.cfg.lstm_channels or [self.top_channel])
            trained = self.fit_lstm("lstm", channels, self.cfg.lstm_lookback)
            self.lstm_model = trained.model
            return trained

    def hidden_features(self) -> None:
        with self.stage("hidden_features"):
            for part in ("train", "validation"):
                matrix = self.lstm_features(part)
                logger.info(f"Hidden features for {part}: {matrix.n_rows} rows x {len(matrix.columns) - 1}")

    def gbt_variants(self, numbers) -> None:
        with self.stage("gbt_variants"):
            for number in numbers:
                if f"M{number}" not in self.models:
                    self.fit_gbt(f"M{number}", self.ablation_recipe(number))

    def evaluate(self, names: list[str]) -> list[AblationResult]:
        results = []
        with self.stage(EVALUATE_STAGE):
            for name in names:
                trained = self.models[name]
                if isinstance(trained.model, lstm.LSTMModel):
                    tensor = self.windows("test", trained.model.channels, trained.model.lookback)
                    scores, labels = lstm.predict_proba(trained.model, tensor), tensor.labels
                    ids, times = tensor.surgery_ids, tensor.times
                else:
                    matrix = self.design(trained.recipe, "test")
                    scores, labels = gbt.predict_proba(trained.model, matrix), matrix.labels
                    ids, times = matrix.surgery_ids, matrix.times
                curve, auc = _safe_pr_auc(scores, labels, f"{name} test")
                if curve is not None:
                    curve.to_csv(_ensure(self.out / "curves") / f"{name}_test.csv")
                _write_csv(
                    pd.DataFrame({"surgery_id": ids, "time_min": times, "label": labels, "probability": scores}),
                    self.out / "scores" / f"{name}_test.csv",
                )
                results.append(
                    AblationResult(
                        name, trained.val_pr_auc, auc, trained.train_seconds, self.fingerprint,
                        trained.n_features, trained.family, trained.lookback,
                    )
                )
                logger.info(f"{name}: test PR-AUC {auc:.5f}")
        return results

    def finish(self, kind: str, results: list[AblationResult]) -> RunResult:
        run = RunResult(
            kind, self.out, self.fingerprint, results, self.audit, self.top_channel, self.importance, dict(self.stage_seconds)
        )
        _write_csv(run.frame(), self.out / "results.csv")
        _write_csv(
            pd.DataFrame([(r.model, r.train_seconds) for r in results], columns=["model", "train_seconds"]),
            self.out / "timings.csv",
        )
        if any(r.lookback is not None for r in results):
            _write_csv(run.lookback_frame(), self.out / "lookback.csv")
        with self.stage("report"):
            (self.out / "report.html").write_text(render_report(run, self.cfg), encoding="utf-8")
        return run


def _ensure(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _run(cfg: ExperimentConfig, kind: str, out_dir, body: Callable[[Workbench], list[AblationResult]]) -> RunResult:
    bench = Workbench(cfg, out_dir)
    with run_lock(bench.out):
        logger.info(f"Starting {kind} run in {bench.out} (fingerprint {bench.fingerprint[:12]})")
        bench.prepare()
        return bench.finish(kind, body(bench))


def run_methodology(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Baseline GBT, importance ranking, LSTM on the top channel, hidden features, hybrid GBT"""

    def body(bench: Workbench) -> list[AblationResult]:
        bench.baseline()
        bench.rank_features()
        bench.train_lstm()
        bench.hidden_features()
        bench.gbt_variants([5])
        return bench.evaluate(["M2", "lstm", "M5"])

    return _run(cfg, "methodology", out_dir, body)


def run_ablation(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Selected feature-set variants M1-M7 built from one shared LSTM"""

    def body(bench: Workbench) -> list[AblationResult]:
        selected = sorted(set(cfg.ablation_models))
        bench.baseline()
        names = []
        if any(ABLATION_TABLE[n][2] for n in selected):
            bench.rank_features()
            bench.train_lstm()
            bench.hidden_features()
            names.append("lstm")
        bench.gbt_variants(selected)
        names += [f"M{n}" for n in selected]
        return bench.evaluate(names)

    return _run(cfg, "ablation", out_dir, body)


def run_lookback_study(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """
    Univariate target-channel models per lookback: LSTM, autoregressive GBT
    on raw lags, and the EMA-feature GBT whose features ignore the lookback
    (trained once, reported at every lookback).
    """
    if len(cfg.lookbacks) < 2:
        raise ConfigError("the lookback study needs at least two lookbacks")

    def body(bench: Workbench) -> list[AblationResult]:
        target = bench.schema.target
        lookbacks = sorted(cfg.lookbacks)
        with bench.stage("gbt_processed"):
            bench.fit_gbt("gbt_processed", bench.make_recipe([target], False), family="gbt_processed")
        names = ["gbt_processed"]
        for L in lookbacks:
            with bench.stage(f"lstm_L{L}"):
                bench.fit_lstm(f"lstm_L{L}", [target], L, family="lstm")
            with bench.stage(f"gbt_lagged_L{L}"):
                recipe = bench.make_recipe([], False, lagged=LaggedSource(channel=target, lookback=L))
                bench.fit_gbt(f"gbt_lagged_L{L}", recipe, family="gbt_lagged", lookback=L)
            names += [f"lstm_L{L}", f"gbt_lagged_L{L}"]
        results = bench.evaluate(names)
        processed = results[0]
        return [replace(processed, model=f"gbt_processed_L{L}", lookback=L) for L in lookbacks] + results[1:]

    return _run(cfg, "lookback", out_dir, body)


# single-step entry points used by the command line


def _export_stage(part: str, stage: str) -> str:
    # held-out rows are only touched under the evaluate stage
    return EVALUATE_STAGE if part == "test" else stage


def featurize(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Processed features + labels for every partition as CSV"""
    bench = Workbench(cfg, out_dir)
    paths = {}
    with run_lock(bench.out):
        bench.prepare()
        for part in PARTITIONS:
            with bench.stage(_export_stage(part, "featurize")):
                paths[part] = _ensure(bench.out / "features") / f"processed_{part}.csv"
                bench.processed(part).to_csv(paths[part])
    return paths


def train_lstm_model(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> TrainedModel:
    bench = Workbench(cfg, out_dir)
    with run_lock(bench.out):
        bench.prepare()
        if not cfg.lstm_channels:
            bench.baseline()
            bench.rank_features()
        return bench.train_lstm()


def extract_hidden_features(cfg: ExperimentConfig, model_path: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    bench = Workbench(cfg, out_dir)
    paths = {}
    with run_lock(bench.out):
        bench.prepare()
        with bench.stage("hidden_features"):
            bench.lstm_model = load_model(model_path, "lstm")
        n2 = bench.lstm_model.params.hidden_dim
        for part in PARTITIONS:
            with bench.stage(_export_stage(part, "hidden_features")):
                tensor = lstm_windows(bench.partition(part), bench.lstm_model, bench.labels(part), cfg.min_time)
                hidden = lstm.extract_hidden(bench.lstm_model, tensor)
                matrix = FeatureMatrix(tuple(hidden_columns(n2)), hidden, tensor.labels, tensor.surgery_ids, tensor.times)
                paths[part] = _ensure(bench.out / "features") / f"hidden_{part}.csv"
                matrix.to_csv(paths[part])
    return paths


def train_gbt_model(cfg: ExperimentConfig, lstm_path: str | Path | None = None, out_dir: str | Path | None = None) -> TrainedModel:
    """Baseline (M2) without an LSTM, hybrid (M5) when an LSTM container is given"""
    bench = Workbench(cfg, out_dir)
    with run_lock(bench.out):
        bench.prepare()
        if lstm_path is None:
            return bench.baseline()
        bench.lstm_model = load_model(lstm_path, "lstm")
        # the hybrid recipe points at models/lstm.tbst
        save_model(bench.out / "models" / LSTM_FILE, bench.lstm_model)
        with bench.stage("gbt_variants"):
            return bench.fit_gbt("M5", bench.ablation_recipe(5))


def evaluate_model(cfg: ExperimentConfig, model_path: str | Path, out_dir: str | Path | None = None) -> AblationResult:
    """Score the test partition with a saved container and record its PR-AUC"""
    model_path = Path(model_path)
    bench = Workbench(cfg, out_dir)
    name = model_path.stem
    with run_lock(bench.out):
        bench.prepare()
        with bench.stage(EVALUATE_STAGE):
            model = load_model(model_path)
            part, labels = bench.partition("test"), bench.labels("test")
            if isinstance(model, lstm.LSTMModel):
                tensor = lstm_windows(part, model, labels, cfg.min_time)
                scores, y, ids, times = lstm.predict_proba(model, tensor), tensor.labels, tensor.surgery_ids, tensor.times
            elif isinstance(model, gbt.GBTModel):
                recipe = GBTRecipe.model_validate(model.metadata["recipe"])
                matrix = design_matrix(part, recipe, labels, base_dir=model_path.parent)
                scores, y, ids, times = gbt.predict_proba(model, matrix), matrix.labels, matrix.surgery_ids, matrix.times
            else:
                raise ModelTypeError(f"cannot evaluate {type(model).__name__}")
            curve, auc = _safe_pr_auc(scores, y, f"{name} test")
            if curve is not None:
                curve.to_csv(_ensure(bench.out / "curves") / f"{name}_test.csv")
            _write_csv(
                pd.DataFrame({"surgery_id": ids, "time_min": times, "label": y, "probability": scores}),
                bench.out / "scores" / f"{name}_test.csv",
            )
        result = AblationResult(name, math.nan, auc, 0.0, bench.fingerprint, len(getattr(model, "feature_names", ())))
        _write_csv(RunResult("evaluate", bench.out, bench.fingerprint, [result], bench.audit).frame(), bench.out / "results.csv")
        logger.info(f"{name}: test PR-AUC {auc:.5f}")
        return result
