import numpy as np
import pytest
from scipy.special import expit

from hypoxcast import lstm
from hypoxcast.errors import FeatureLayoutError, LookbackMismatchError, TrainingError
from hypoxcast.features import WindowTensor
from hypoxcast.lstm import LSTMConfig, LSTMModel, LSTMParams
from hypoxcast.metrics import log_loss
from hypoxcast.settings import settings


def _tensor(windows, labels):
    n = windows.shape[0]
    return WindowTensor(
        windows=windows,
        lookback=windows.shape[1],
        channels=tuple(f"c{k}" for k in range(windows.shape[2])),
        labels=np.asarray(labels, dtype=np.int8),
        surgery_ids=np.array(["S"] * n, dtype=object),
        times=np.arange(n),
    )


def _random_params(input_dim=2, sizes=(3, 3), seed=0):
    cfg = LSTMConfig(input_dim=input_dim, layer_sizes=sizes)
    params = lstm.init_params(cfg, np.random.default_rng(seed))
    # nonzero biases so every gate path carries gradient
    rng = np.random.default_rng(seed + 100)
    for name, value in params.tensors.items():
        if name.startswith("b"):
            params.tensors[name] = value + 0.1 * rng.normal(size=value.shape)
    return params


def test_zero_params_cell():
    W, U, b = np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8)
    c_prev = np.array([[0.4, -1.2]])
    h, c, cache = lstm.cell_forward(np.ones((1, 3)), np.zeros((1, 2)), c_prev, W, U, b)
    assert cache.i.tolist() == [[0.5, 0.5]] and cache.g.tolist() == [[0.0, 0.0]]
    assert np.allclose(c, 0.5 * c_prev)
    assert np.allclose(h, 0.5 * np.tanh(0.5 * c_prev))


def test_zero_params_from_rest():
    params = LSTMParams.zeros(2, (3, 3))
    fp = lstm.forward(np.ones((4, 5, 2)), params)
    assert np.all(fp.hidden == 0.0)
    assert np.all(fp.probability == 0.5)


def test_forget_saturation_keeps_memory():
    n = 2
    b = np.zeros(4 * n)
    b[:n] = -50.0
    b[n:2 * n] = 50.0
    c_prev = np.array([[0.7, -0.3]])
    _, c, _ = lstm.cell_forward(np.ones((1, 1)), np.zeros((1, n)), c_prev, np.zeros((4 * n, 1)), np.zeros((4 * n, n)), b)
    assert np.allclose(c, c_prev, atol=1e-12)


def test_cell_matches_hand_evaluation(rng):
    d, n = 3, 2
    W, U, b = rng.normal(size=(4 * n, d)) * 0.3, rng.normal(size=(4 * n, n)) * 0.3, rng.normal(size=4 * n) * 0.1
    x, h_prev, c_prev = rng.normal(size=d), rng.normal(size=n), rng.normal(size=n)
    h, c, _ = lstm.cell_forward(x[None], h_prev[None], c_prev[None], W, U, b)

    def gate(k):
        return W[k * n:(k + 1) * n] @ x + U[k * n:(k + 1) * n] @ h_prev + b[k * n:(k + 1) * n]

    i, f, g, o = expit(gate(0)), expit(gate(1)), np.tanh(gate(2)), expit(gate(3))
    c_ref = f * c_prev + i * g
    h_ref = o * np.tanh(c_ref)
    assert np.max(np.abs(c[0] - c_ref)) < 1e-12
    assert np.max(np.abs(h[0] - h_ref)) < 1e-12


def test_cell_rejects_bad_shapes():
    with pytest.raises(ValueError):
        lstm.cell_forward(np.ones((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((8, 3)), np.zeros((8, 2)), np.zeros(8))


def test_loss_values():
    assert lstm.loss(0.5, 1) == pytest.approx(np.log(2))
    assert lstm.loss(1 - 1e-15, 1) < 1e-11
    assert np.mean(lstm.loss([0.5, 0.5], [1, 0])) == pytest.approx(np.log(2))
    assert np.isfinite(lstm.loss(0.0, 1))


def _numeric_grad(params, windows, labels, name, index, masks=None, eps=1e-6):
    def objective(delta):
        p = params.copy()
        p.tensors[name][index] += delta
        fp = lstm.forward(windows, p, "train", masks)
        return float(np.mean(lstm.loss(fp.probability, labels)))

    return (objective(eps) - objective(-eps)) / (2 * eps)


@pytest.mark.parametrize("with_masks", [False, True])
def test_backward_matches_finite_differences(with_masks):
    params = _random_params()
    rng = np.random.default_rng(7)
    windows = rng.normal(size=(5, 4, 2))
    labels = np.array([1, 0, 1, 1, 0])
    masks = None
    if with_masks:
        cfg = LSTMConfig(input_dim=2, layer_sizes=(3, 3), dropout=0.3, recurrent_dropout=0.3)
        masks = lstm.sample_masks(cfg, 5, rng)
    grads = lstm.backward(lstm.forward(windows, params, "train", masks), labels)
    assert set(grads) == set(params.tensors)
    for name, tensor in params.tensors.items():
        assert grads[name].shape == tensor.shape
        for index in np.ndindex(tensor.shape):
            numeric = _numeric_grad(params, windows, labels, name, index, masks)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-8), (name, index)


def test_backward_needs_train_pass():
    fp = lstm.forward(np.zeros((1, 3, 2)), LSTMParams.zeros(2, (2, 2)), "infer")
    with pytest.raises(ValueError):
        lstm.backward(fp, [1])


def test_rmsprop_first_step():
    params, state = lstm.rmsprop_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, None, lr=0.001)
    assert params["w"][0] == pytest.approx(-0.0031623, abs=1e-7)
    assert state["w"][0] == pytest.approx(0.1)


def test_rmsprop_zero_gradient():
    theta = {"w": np.array([0.3, -2.0])}
    params, _ = lstm.rmsprop_step(theta, {"w": np.zeros(2)}, None, lr=0.01)
    assert params["w"].tolist() == [0.3, -2.0]


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = lstm.clip_by_global_norm(grads, 1.0)
    assert clipped["a"][0] == pytest.approx(0.6) and clipped["b"][0] == pytest.approx(0.8)
    assert lstm.clip_by_global_norm(grads, 10.0) is grads


def _random_task(n, lookback=6, seed=0):
    rng = np.random.default_rng(seed)
    windows = rng.normal(size=(n, lookback, 1))
    labels = (windows[:, -2:, 0].sum(axis=1) > 0).astype(np.int8)
    return _tensor(windows, labels)


def test_training_is_deterministic():
    cfg = LSTMConfig(layer_sizes=(3, 3), max_epochs=3, patience_epochs=3, batch_size=32, seed=5)
    train_set, val_set = _random_task(120, seed=1), _random_task(40, seed=2)
    m1, r1 = lstm.train(train_set, val_set, cfg)
    m2, r2 = lstm.train(train_set, val_set, cfg)
    for name in m1.params.tensors:
        assert np.array_equal(m1.params.tensors[name], m2.params.tensors[name])
    assert r1.val_loss == r2.val_loss
    assert len(r1.train_loss) == 3


def test_early_stopping_keeps_best_epoch():
    cfg = LSTMConfig(layer_sizes=(3, 3), max_epochs=30, patience_epochs=2, learning_rate=0.2, batch_size=16, seed=1)
    model, report = lstm.train(_random_task(64, seed=3), _random_task(32, seed=4), cfg)
    assert report.stop_reason in ("early_stopping", "max_epochs")
    assert report.val_loss[report.best_epoch] == min(report.val_loss)
    if report.stop_reason == "early_stopping":
        assert len(report.val_loss) == report.best_epoch + 1 + cfg.patience_epochs
    p = lstm.predict_proba(model, _random_task(32, seed=4))
    assert log_loss(p, _random_task(32, seed=4).labels) == pytest.approx(report.val_loss[report.best_epoch])


def test_pr_auc_monitor_falls_back_without_validation_positives(caplog):
    cfg = LSTMConfig(layer_sizes=(3, 3), max_epochs=8, patience_epochs=2, learning_rate=0.2, batch_size=16, seed=1, monitor="val_pr_auc")
    val_set = _random_task(32, seed=4)
    val_set = _tensor(val_set.windows, np.zeros(32, dtype=np.int8))
    with caplog.at_level("WARNING", logger="hypoxcast.lstm"):
        _, report = lstm.train(_random_task(64, seed=3), val_set, cfg)
    assert report.monitor == "val_loss"
    assert report.val_loss[report.best_epoch] == min(report.val_loss)
    assert all(np.isnan(report.val_pr_auc))
    assert "no positive labels" in caplog.text


def test_non_finite_loss_raises():
    bad = _random_task(20, seed=1)
    windows = bad.windows.copy()
    windows[0, 0, 0] = np.nan
    cfg = LSTMConfig(layer_sizes=(2, 2), max_epochs=1, patience_epochs=1, batch_size=8)
    with pytest.raises(TrainingError, match="epoch 0"):
        lstm.train(_tensor(windows, bad.labels), _random_task(10, seed=2), cfg)


def test_train_rejects_channel_mismatch():
    cfg = LSTMConfig(input_dim=2, max_epochs=1, patience_epochs=1)
    with pytest.raises(FeatureLayoutError):
        lstm.train(_random_task(10), _random_task(10), cfg)


def test_inference_checks_layout():
    model = LSTMModel(LSTMConfig(), LSTMParams.zeros(1, (2, 2)), lookback=6, channels=("sao2",))
    assert lstm.extract_hidden(model, np.zeros((3, 6, 1))).shape == (3, 2)
    with pytest.raises(LookbackMismatchError):
        lstm.predict_proba(model, np.zeros((3, 5, 1)))
    with pytest.raises(FeatureLayoutError):
        lstm.extract_hidden(model, np.zeros((3, 6, 2)))


def test_inference_is_chunked(monkeypatch):
    params = _random_params(input_dim=1, sizes=(3, 3))
    model = LSTMModel(LSTMConfig(), params, lookback=4, channels=("sao2",))
    windows = np.random.default_rng(0).normal(size=(10, 4, 1))
    whole = lstm.predict_proba(model, windows)
    monkeypatch.setattr(settings, "INFER_BATCH_SIZE", 3)
    assert np.allclose(lstm.predict_proba(model, windows), whole, rtol=0, atol=1e-12)


def test_dropout_only_applies_in_training():
    params = _random_params()
    windows = np.random.default_rng(1).normal(size=(4, 3, 2))
    cfg = LSTMConfig(input_dim=2, layer_sizes=(3, 3), dropout=0.5, recurrent_dropout=0.5)
    masks = lstm.sample_masks(cfg, 4, np.random.default_rng(2))
    infer = lstm.forward(windows, params, "infer", masks)
    plain = lstm.forward(windows, params, "infer")
    assert np.array_equal(infer.probability, plain.probability)
    assert not np.allclose(lstm.forward(windows, params, "train", masks).probability, plain.probability)


def test_config_validation():
    with pytest.raises(ValueError):
        LSTMConfig(patience_epochs=60, max_epochs=50)
    assert LSTMConfig(layer_sizes="16,8").layer_sizes == (16, 8)


@pytest.mark.slow
def test_learns_planted_rule():
    """label = 1 iff the channel exceeded 0 anywhere in the last 10 steps"""
    rng = np.random.default_rng(0)

    def task(n):
        windows = -1.0 + 0.1 * rng.normal(size=(n, 10, 1))
        labels = rng.random(n) < 0.3
        spikes = rng.integers(0, 10, size=n)
        windows[labels, spikes[labels], 0] = 1.0
        return _tensor(windows, labels.astype(np.int8))

    cfg = LSTMConfig(
        layer_sizes=(16, 16), dropout=0.0, recurrent_dropout=0.0, learning_rate=0.01,
        batch_size=64, max_epochs=30, patience_epochs=30, monitor="val_pr_auc",
    )
    _, report = lstm.train(task(2000), task(500), cfg)
    assert max(report.val_pr_auc) >= 0.95
