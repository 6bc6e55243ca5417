import math
import statistics

import pandas as pd
import pytest

from hypoxcast import pipeline
from hypoxcast.config import ExperimentConfig
from hypoxcast.container import load_model
from hypoxcast.errors import ConfigError, RunLockedError, StageError
from hypoxcast.pipeline import PartitionAudit, evaluate_model, featurize, run_ablation, run_lookback_study, run_methodology
from hypoxcast.settings import settings

from conftest import small_config


def test_test_partition_only_read_when_evaluating(ablation_run):
    assert ablation_run.audit.violations() == []
    assert ablation_run.audit.stages_reading("test") == ["evaluate"]
    assert "baseline_gbt" in ablation_run.audit.stages_reading("train")


def test_ablation_feature_counts(ablation_run):
    n = {r.model: r.n_features for r in ablation_run.results}
    hidden = 4
    assert n["M1"] == 5
    assert n["M2"] == 34
    assert n["M3"] == hidden
    assert n["M4"] == n["M2"] + 1
    assert n["M5"] == n["M2"] + hidden
    assert n["M6"] == 30
    assert n["M7"] == 29 + hidden
    assert n["lstm"] == 10


def test_ablation_outputs(ablation_run):
    out = ablation_run.out_dir
    for name in ("results.csv", "timings.csv", "importance.csv", "report.html", "split.csv", "config.txt"):
        assert (out / name).is_file(), name
    assert not (out / settings.RUN_LOCK_NAME).exists()
    models = {p.stem for p in (out / "models").glob("*.tbst")}
    assert models == {"lstm", "M1", "M2", "M3", "M4", "M5", "M6", "M7"}
    assert "M5" in (out / "report.html").read_text()

    results = pd.read_csv(out / "results.csv")
    assert list(results.columns) == ["model", "split", "pr_auc", "fingerprint"]
    assert len(results) == 2 * len(ablation_run.results)
    assert results["fingerprint"].nunique() == 1
    assert "train_seconds" not in results.columns


def test_ablation_pr_auc_values_are_bounded(ablation_run):
    for r in ablation_run.results:
        for value in (r.val_pr_auc, r.test_pr_auc):
            assert math.isnan(value) or 0.0 <= value <= 1.0


def test_top_channel_is_a_time_series(ablation_run):
    assert ablation_run.top_channel in ("sao2", "etco2", "heart_rate", "mean_bp", "resp_rate", "temperature")
    importance = pd.read_csv(ablation_run.out_dir / "importance.csv")
    assert list(importance.columns) == ["feature", "gain"]
    assert importance["gain"].is_monotonic_decreasing


def test_split_file_covers_every_surgery(ablation_run):
    split = pd.read_csv(ablation_run.out_dir / "split.csv")
    assert split["surgery_id"].is_unique
    assert split["partition"].value_counts().to_dict() == {"train": 14, "validation": 5, "test": 5}


def test_methodology_is_reproducible(tmp_path):
    first = run_methodology(small_config(tmp_path / "a"))
    second = run_methodology(small_config(tmp_path / "b"))
    assert [r.model for r in first.results] == ["M2", "lstm", "M5"]
    assert first.audit.violations() == []
    assert (first.out_dir / "results.csv").read_bytes() == (second.out_dir / "results.csv").read_bytes()


def test_locked_output_directory(tmp_path):
    tmp_path.joinpath(settings.RUN_LOCK_NAME).write_text("123")
    with pytest.raises(RunLockedError):
        run_methodology(small_config(tmp_path))
    assert tmp_path.joinpath(settings.RUN_LOCK_NAME).exists()


def test_missing_dataset_is_a_prepare_failure(tmp_path):
    cfg = small_config(tmp_path, dataset_path=tmp_path / "nope.csv")
    with pytest.raises(StageError) as info:
        run_methodology(cfg)
    assert info.value.stage == "prepare"
    assert not tmp_path.joinpath(settings.RUN_LOCK_NAME).exists()


def test_unknown_lstm_channel_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        run_methodology(small_config(tmp_path, lstm_channels="bogus"))


def test_lookback_study(tmp_path):
    run = run_lookback_study(small_config(tmp_path))
    frame = pd.read_csv(tmp_path / "lookback.csv")
    assert set(frame["family"]) == {"gbt_processed", "lstm", "gbt_lagged"}
    assert sorted(frame["lookback"].unique()) == [5, 10]
    processed = frame[(frame["family"] == "gbt_processed") & (frame["split"] == "test")]
    assert processed["pr_auc"].nunique(dropna=False) == 1
    assert run.result("gbt_lagged_L5").n_features == 5
    assert run.result("lstm_L10").n_features == 10
    assert "Lookback study" in (tmp_path / "report.html").read_text()


def test_lookback_study_needs_two_lookbacks(tmp_path):
    with pytest.raises(ConfigError):
        run_lookback_study(small_config(tmp_path, lookbacks="5"))


def _derived(columns):
    return [c for c in columns if c.endswith("__raw") or "__ema_" in c or "__emv_" in c]


def test_featurize_standardizes_derived_columns_on_train(tmp_path):
    paths = featurize(small_config(tmp_path))
    train = pd.read_csv(paths["train"])
    derived = _derived(train.columns)
    assert len(derived) == 6 * 5
    assert train[derived].mean().abs().max() < 1e-6
    assert (train[derived].std(ddof=0) - 1.0).abs().max() < 1e-6
    assert train["age__static"].mean() > 18.0
    test = pd.read_csv(paths["test"])
    assert test["sao2__raw"].abs().mean() < 10.0


def test_featurize_reads_test_only_when_evaluating(tmp_path, monkeypatch):
    audits = []

    class RecordingAudit(PartitionAudit):
        def __init__(self):
            super().__init__()
            audits.append(self)

    monkeypatch.setattr(pipeline, "PartitionAudit", RecordingAudit)
    featurize(small_config(tmp_path))
    (audit,) = audits
    assert audit.violations() == []
    assert audit.stages_reading("test") == ["evaluate"]
    assert "featurize" in audit.stages_reading("train")


def test_gbt_recipe_carries_train_column_stats(ablation_run):
    model = load_model(ablation_run.out_dir / "models" / "M5.tbst", "gbt")
    stats = model.metadata["recipe"]["column_stats"]
    assert sorted(stats["means"]) == sorted(_derived(model.feature_names))
    assert abs(stats["means"]["sao2__raw"]) > 50.0


def test_evaluate_saved_model(ablation_run, tmp_path):
    result = evaluate_model(small_config(tmp_path), ablation_run.out_dir / "models" / "M5.tbst")
    expected = ablation_run.result("M5").test_pr_auc
    assert result.model == "M5"
    if math.isnan(expected):
        assert math.isnan(result.test_pr_auc)
    else:
        assert result.test_pr_auc == pytest.approx(expected, abs=1e-12)
    assert (tmp_path / "scores" / "M5_test.csv").is_file()


# desk-scale replication over five seeds; minutes per test


def _median(runs, model):
    return statistics.median(run.result(model).test_pr_auc for run in runs)


@pytest.fixture(scope="module")
def desk_ablations(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    return [run_ablation(ExperimentConfig.from_text(f"seed={seed}\noutput_dir={out / str(seed)}")) for seed in range(5)]


@pytest.mark.slow
def test_ablation_ordering(desk_ablations):
    assert _median(desk_ablations, "M2") > _median(desk_ablations, "M1")
    assert _median(desk_ablations, "M5") - _median(desk_ablations, "M2") >= 0.01
    assert _median(desk_ablations, "M5") >= _median(desk_ablations, "M4")
    assert _median(desk_ablations, "M7") > _median(desk_ablations, "M6")


@pytest.mark.slow
def test_target_channel_ranks_first(desk_ablations):
    assert [run.top_channel for run in desk_ablations].count("sao2") >= 3


@pytest.mark.slow
def test_longer_lookback_helps_lstm(tmp_path):
    runs = [
        run_lookback_study(ExperimentConfig.from_text(f"seed={seed}\noutput_dir={tmp_path / str(seed)}"))
        for seed in range(5)
    ]
    assert _median(runs, "lstm_L60") - _median(runs, "lstm_L30") >= 0.01
    assert _median(runs, "lstm_L60") - _median(runs, "gbt_processed_L60") >= 0.01
