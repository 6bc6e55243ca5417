import math

import numpy as np
import pytest

from hypoxcast.dataset import as_series
from hypoxcast.errors import FeatureLayoutError
from hypoxcast.features import (
    EmaConfig,
    FeatureMatrix,
    LabelConfig,
    NormalizationStats,
    build_processed_features,
    ema,
    emv,
    fit_column_stats,
    fit_normalization,
    impute,
    impute_and_standardize,
    label_cohort,
    label_hypoxemia,
    lagged_features,
    processed_columns,
    standardize_columns,
    window_samples,
)

from conftest import make_cohort, make_matrix

BETA = 1.0 - math.exp(-1.0)


def test_standardize_imputes_to_zero():
    cohort = make_cohort({"A": {"sao2": [None, 95.0, 90.0]}})
    stats = NormalizationStats({"sao2": 90.0}, {"sao2": 5.0})
    out = impute_and_standardize(cohort, stats).by_id("A").values("sao2")
    assert out.tolist() == pytest.approx([0.0, 1.0, 0.0])


def test_constant_channel_std_is_floored():
    cohort = make_cohort({"A": {"sao2": [5.0, 5.0]}})
    stats = fit_normalization(cohort)
    assert stats.stds["sao2"] == 0.0
    assert impute_and_standardize(cohort, stats).by_id("A").values("sao2").tolist() == [0.0, 0.0]


def test_impute_keeps_scale_and_clears_mask():
    cohort = make_cohort({"A": {"sao2": [97.0, None, 95.0]}})
    out = impute(cohort, fit_normalization(cohort)).by_id("A")
    assert out.present("sao2").all()
    assert out.values("sao2").tolist() == [97.0, 96.0, 95.0]


def test_all_missing_training_channel_gets_identity_stats():
    cohort = make_cohort({"A": {"sao2": [97.0, 96.0], "etco2": [None, None]}})
    stats = fit_normalization(cohort)
    assert (stats.means["etco2"], stats.stds["etco2"]) == (0.0, 1.0)


def test_stats_must_cover_every_channel():
    cohort = make_cohort({"A": {"sao2": [97.0], "etco2": [38.0]}})
    with pytest.raises(FeatureLayoutError):
        impute(cohort, NormalizationStats({"sao2": 97.0}, {"sao2": 1.0}))


def test_ema_constant_fixed_point():
    assert ema([10.0, 10.0, 10.0], 0.1).tolist() == pytest.approx([10.0, 10.0, 10.0])


def test_ema_two_steps():
    assert ema([0.0, 1.0], 1.0).tolist() == pytest.approx([0.0, 0.63212], abs=1e-5)


def test_ema_matches_closed_form(rng):
    x = rng.normal(size=40)
    alpha = 0.3
    beta = 1.0 - math.exp(-alpha)
    y = ema(x, alpha)
    for t in (0, 1, 7, 39):
        expected = beta * sum((1 - beta) ** k * x[t - k] for k in range(t)) + (1 - beta) ** t * x[0]
        assert y[t] == pytest.approx(expected, rel=1e-10, abs=1e-12)


def test_larger_alpha_tracks_faster():
    step = np.r_[np.zeros(5), np.ones(5)]
    assert ema(step, 5.0)[6] > ema(step, 0.1)[6]


def test_emv_two_steps():
    assert emv([0.0, 1.0], 1.0)[1] == pytest.approx((1 - BETA) * BETA, abs=1e-10)
    assert emv([0.0, 1.0], 1.0)[1] == pytest.approx(0.23254, abs=1e-5)


def test_emv_constant_is_zero():
    assert emv([3.0] * 6, 5.0).tolist() == pytest.approx([0.0] * 6, abs=1e-12)


def test_emv_is_nonnegative(rng):
    assert np.all(emv(rng.normal(size=200) * 10, 0.7) >= 0.0)


def test_ema_rejects_bad_input():
    with pytest.raises(ValueError):
        ema([1.0], 0.0)
    with pytest.raises(ValueError):
        ema([], 1.0)


def test_processed_column_counts():
    cfg = EmaConfig()
    one = make_cohort({"A": {"sao2": [97.0, 96.0, 95.0]}})
    assert len(build_processed_features(one, cfg, ["sao2"], False).columns) == 5

    channels = ["sao2", "c1", "c2", "c3", "c4", "c5"]
    statics = ["s1", "s2", "s3", "s4"]
    wide = make_cohort(
        {"A": {ch: [1.0, 2.0] for ch in channels}},
        {"A": {s: 1.0 for s in statics}},
    )
    matrix = build_processed_features(wide, cfg, channels, True)
    assert len(matrix.columns) == 34
    assert matrix.columns[:5] == tuple(processed_columns("sao2", cfg))
    assert matrix.columns[-4:] == ("s1__static", "s2__static", "s3__static", "s4__static")


def test_processed_features_need_imputation():
    cohort = make_cohort({"A": {"sao2": [97.0, None]}})
    with pytest.raises(FeatureLayoutError, match="impute"):
        build_processed_features(cohort, EmaConfig(), ["sao2"], False)


def test_processed_rows_follow_labels_and_min_time():
    cohort = make_cohort({"B": {"sao2": [97.0] * 12}, "A": {"sao2": [97.0] * 12}})
    labels = label_cohort(cohort, LabelConfig())
    matrix = build_processed_features(cohort, EmaConfig(), ["sao2"], False, labels, min_time=3)
    # minutes 3..6 have a full five-minute horizon
    assert matrix.provenance == [("A", t) for t in range(3, 7)] + [("B", t) for t in range(3, 7)]
    assert matrix.labels.tolist() == [0] * 8


def test_label_future_desaturation():
    y = label_hypoxemia(as_series([96, 95, 94, 91, 96, 97]), LabelConfig())
    assert y[0] == 1
    assert np.ma.getmaskarray(y)[1:].all()


def test_label_no_desaturation():
    y = label_hypoxemia(as_series([97, 95, 94, 93, 96, 97]), LabelConfig())
    assert y[0] == 0 and not np.ma.getmaskarray(y)[0]


def test_label_currently_low_is_undefined():
    series = as_series([90, 95, 94, 93, 96, 97])
    assert np.ma.getmaskarray(label_hypoxemia(series, LabelConfig()))[0]
    relaxed = label_hypoxemia(series, LabelConfig(require_currently_normal=False))
    assert relaxed[0] == 0


def test_label_ignores_missing_future():
    y = label_hypoxemia(as_series([97, None, None, None, None, None, 97]), LabelConfig())
    assert np.ma.getmaskarray(y)[0]
    assert not np.ma.getmaskarray(y)[1] and y[1] == 0


def test_window_count():
    cohort = make_cohort({"A": {"sao2": [97.0] * 100}})
    assert window_samples(cohort, ["sao2"], 60).n_samples == 41
    labels = label_cohort(cohort, LabelConfig())
    assert window_samples(cohort, ["sao2"], 60, labels).n_samples <= 41


def test_window_contents():
    x = np.arange(20, dtype=float)
    cohort = make_cohort({"A": {"sao2": x.tolist(), "hr": (x * 10).tolist()}})
    tensor = window_samples(cohort, ["sao2", "hr"], 4)
    assert tensor.windows.shape == (17, 4, 2)
    assert tensor.times[0] == 3
    k = list(tensor.times).index(10)
    assert tensor.windows[k, :, 0].tolist() == [7.0, 8.0, 9.0, 10.0]
    assert tensor.windows[k, :, 1].tolist() == [70.0, 80.0, 90.0, 100.0]


def test_lagged_features():
    cohort = make_cohort({"A": {"sao2": np.arange(8, dtype=float).tolist()}})
    matrix = lagged_features(cohort, "sao2", 3)
    assert matrix.columns == ("sao2__lag_2", "sao2__lag_1", "sao2__lag_0")
    assert matrix.values[0].tolist() == [0.0, 1.0, 2.0]
    assert matrix.times[0] == 2


def test_column_stats_standardize():
    matrix = make_matrix([[1.0, 10.0], [3.0, 10.0]])
    out = standardize_columns(matrix, fit_column_stats(matrix))
    assert out.values[:, 0].tolist() == [-1.0, 1.0]
    assert out.values[:, 1].tolist() == [0.0, 0.0]


def test_column_stats_leave_uncovered_columns_alone():
    matrix = make_matrix([[1.0, 50.0], [3.0, 70.0]])
    stats = fit_column_stats(matrix).subset(["f0", "nope"])
    assert list(stats.means) == ["f0"]
    out = standardize_columns(matrix, stats)
    assert out.values[:, 0].tolist() == [-1.0, 1.0]
    assert out.values[:, 1].tolist() == [50.0, 70.0]


def test_matrix_select_and_hstack():
    matrix = make_matrix([[1.0, 2.0], [3.0, 4.0]], y=[0, 1])
    assert matrix.select(["f1"]).values.tolist() == [[2.0], [4.0]]
    with pytest.raises(FeatureLayoutError):
        matrix.select(["nope"])
    with pytest.raises(FeatureLayoutError):
        matrix.hstack(matrix)
    shifted = FeatureMatrix(("g",), [[0.0], [0.0]], None, matrix.surgery_ids, matrix.times + 1)
    with pytest.raises(FeatureLayoutError, match="provenance"):
        matrix.hstack(shifted)


def test_matrix_csv(tmp_path):
    matrix = make_matrix([[1.5, 2.0], [3.0, -4.25]], y=[0, 1])
    matrix.to_csv(tmp_path / "m.csv")
    again = FeatureMatrix.from_csv(tmp_path / "m.csv")
    assert again.columns == matrix.columns
    assert np.array_equal(again.values, matrix.values)
    assert again.labels.tolist() == [0, 1]
    assert again.provenance == matrix.provenance


def test_matrix_rejects_non_binary_labels():
    with pytest.raises(FeatureLayoutError):
        make_matrix([[1.0]], y=[2])
