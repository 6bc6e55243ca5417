"""
Two-layer LSTM binary classifier over fixed-lookback windows

Gate order is (i, f, g, o). Training uses RMSProp, inverted dropout on layer
inputs, variational recurrent dropout (one mask per sequence) and early
stopping on a validation metric. The final-step hidden state of the second
layer is the representation handed to the tree model.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from .coerce import IntPair
from .errors import FeatureLayoutError, LookbackMismatchError, TrainingError
from .features import WindowTensor
from .metrics import PROB_CLIP, accuracy_at_threshold, log_loss, pr_auc
from .settings import settings

logger = logging.getLogger(__name__)

N_LAYERS = 2


class LSTMConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layer_sizes: IntPair = (32, 32)
    input_dim: int = Field(default=1, ge=1)
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    recurrent_dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    learning_rate: float = Field(default=0.001, gt=0.0)
    rho: float = Field(default=0.9, gt=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    patience_epochs: int = Field(default=20, ge=1)
    max_epochs: int = Field(default=50, ge=1)
    monitor: Literal["val_loss", "val_accuracy", "val_pr_auc"] = "val_loss"
    clip_norm: float | None = Field(default=None, gt=0.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "LSTMConfig":
        if min(self.layer_sizes) < 1:
            raise ValueError("layer_sizes must be positive")
        if self.patience_epochs > self.max_epochs:
            raise ValueError("patience_epochs must not exceed max_epochs")
        return self


@dataclass
class LSTMParams:
    """Named tensors W1, U1, b1, W2, U2, b2 (gate rows i, f, g, o), w_out, b_out"""

    tensors: dict[str, np.ndarray]

    def layer(self, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = index + 1
        return self.tensors[f"W{k}"], self.tensors[f"U{k}"], self.tensors[f"b{k}"]

    @property
    def input_dim(self) -> int:
        return self.tensors["W1"].shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.tensors["w_out"].shape[0]

    def copy(self) -> "LSTMParams":
        return LSTMParams({k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def zeros(cls, input_dim: int, layer_sizes: tuple[int, int]) -> "LSTMParams":
        tensors, d = {}, input_dim
        for k, n in enumerate(layer_sizes, start=1):
            tensors[f"W{k}"] = np.zeros((4 * n, d))
            tensors[f"U{k}"] = np.zeros((4 * n, n))
            tensors[f"b{k}"] = np.zeros(4 * n)
            d = n
        tensors["w_out"] = np.zeros(d)
        tensors["b_out"] = np.zeros(1)
        return cls(tensors)


def init_params(cfg: LSTMConfig, rng: np.random.Generator) -> LSTMParams:
    """Uniform +-1/sqrt(fan_in) for W and U, zero biases except forget gate bias 1"""
    params = LSTMParams.zeros(cfg.input_dim, cfg.layer_sizes)
    d = cfg.input_dim
    for k, n in enumerate(cfg.layer_sizes, start=1):
        params.tensors[f"W{k}"] = rng.uniform(-1.0, 1.0, (4 * n, d)) / math.sqrt(d)
        params.tensors[f"U{k}"] = rng.uniform(-1.0, 1.0, (4 * n, n)) / math.sqrt(n)
        params.tensors[f"b{k}"][n:2 * n] = 1.0
        d = n
    params.tensors["w_out"] = rng.uniform(-1.0, 1.0, d) / math.sqrt(d)
    return params


@dataclass
class GateCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray


def cell_forward(x_t, h_prev, c_prev, W, U, b) -> tuple[np.ndarray, np.ndarray, GateCache]:
    n = U.shape[1]
    if W.shape[0] != 4 * n or U.shape[0] != 4 * n or b.shape != (4 * n,):
        raise ValueError(f"inconsistent parameter shapes W{W.shape} U{U.shape} b{b.shape}")
    if x_t.shape[-1] != W.shape[1] or h_prev.shape[-1] != n or c_prev.shape[-1] != n:
        raise ValueError(
            f"dimension mismatch: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} for W{W.shape}"
        )
    z = x_t @ W.T + h_prev @ U.T + b
    zi, zf, zg, zo = np.split(z, 4, axis=-1)
    i, f, o = expit(zi), expit(zf), expit(zo)
    g = np.tanh(zg)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, GateCache(x_t, h_prev, c_prev, i, f, g, o, tanh_c)


@dataclass
class DropoutMasks:
    """Per layer: an input mask (batch, d_in) and a recurrent mask (batch, n), shared over time"""

    inputs: list[np.ndarray | None]
    recurrent: list[np.ndarray | None]


def _bernoulli(rng: np.random.Generator, rate: float, shape: tuple[int, int]) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


def sample_masks(cfg: LSTMConfig, batch: int, rng: np.random.Generator) -> DropoutMasks:
    dims = (cfg.input_dim, cfg.layer_sizes[0])
    return DropoutMasks(
        inputs=[_bernoulli(rng, cfg.dropout, (batch, d)) for d in dims],
        recurrent=[_bernoulli(rng, cfg.recurrent_dropout, (batch, n)) for n in cfg.layer_sizes],
    )


@dataclass
class ForwardPass:
    probability: np.ndarray
    hidden: np.ndarray
    margin: np.ndarray
    params: LSTMParams
    caches: list[list[GateCache]] = field(default_factory=list)
    masks: DropoutMasks | None = None


def forward(
    windows: np.ndarray,
    params: LSTMParams,
    mode: Literal["train", "infer"] = "infer",
    masks: DropoutMasks | None = None,
) -> ForwardPass:
    """Stacked pass over windows shaped (batch, L, input_dim); masks only apply in train mode"""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode '{mode}'")
    seq = np.asarray(windows, dtype=float)
    if seq.ndim == 2:
        seq = seq[None]
    if seq.ndim != 3 or seq.shape[2] != params.input_dim:
        raise ValueError(f"windows shaped {seq.shape} do not match input_dim {params.input_dim}")
    train = mode == "train"
    masks = masks if train else None
    batch, steps, _ = seq.shape
    caches = []
    for layer in range(N_LAYERS):
        W, U, b = params.layer(layer)
        n = U.shape[1]
        mx = masks.inputs[layer] if masks else None
        mh = masks.recurrent[layer] if masks else None
        h, c = np.zeros((batch, n)), np.zeros((batch, n))
        out = np.empty((batch, steps, n))
        layer_caches = []
        for t in range(steps):
            x_t = seq[:, t, :] if mx is None else seq[:, t, :] * mx
            h_in = h if mh is None else h * mh
            h, c, cache = cell_forward(x_t, h_in, c, W, U, b)
            out[:, t, :] = h
            if train:
                layer_caches.append(cache)
        caches.append(layer_caches)
        seq = out
    hidden = seq[:, -1, :]
    margin = hidden @ params.tensors["w_out"] + params.tensors["b_out"][0]
    return ForwardPass(expit(margin), hidden, margin, params, caches if train else [], masks)


def loss(probability, label):
    """Binary cross-entropy with p clamped to [1e-12, 1 - 1e-12]"""
    p = np.clip(np.asarray(probability, dtype=float), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(label, dtype=float)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def backward(fp: ForwardPass, labels) -> dict[str, np.ndarray]:
    """Exact gradients of the batch-mean clamped cross-entropy (BPTT through both layers)"""
    if not fp.caches:
        raise ValueError("backward needs caches from a train-mode forward pass")
    params = fp.params
    y = np.asarray(labels, dtype=float).reshape(-1)
    p = fp.probability
    batch = p.size
    inside = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)
    dz = np.where(inside, p - y, 0.0) / batch

    grads = {"w_out": fp.hidden.T @ dz, "b_out": np.array([dz.sum()])}
    steps = len(fp.caches[0])
    n_top = params.hidden_dim
    d_above = np.zeros((batch, steps, n_top))
    d_above[:, -1, :] = np.outer(dz, params.tensors["w_out"])

    for layer in reversed(range(N_LAYERS)):
        W, U, _ = params.layer(layer)
        n = U.shape[1]
        mx = fp.masks.inputs[layer] if fp.masks else None
        mh = fp.masks.recurrent[layer] if fp.masks else None
        dW, dU, db = np.zeros_like(W), np.zeros_like(U), np.zeros(4 * n)
        dh_next, dc_next = np.zeros((batch, n)), np.zeros((batch, n))
        d_below = np.zeros((batch, steps, W.shape[1])) if layer > 0 else None
        for t in reversed(range(steps)):
            k = fp.caches[layer][t]
            dh = d_above[:, t, :] + dh_next
            do = dh * k.tanh_c
            dc = dc_next + dh * k.o * (1.0 - k.tanh_c ** 2)
            dc_next = dc * k.f
            dZ = np.concatenate(
                [
                    dc * k.g * k.i * (1.0 - k.i),
                    dc * k.c_prev * k.f * (1.0 - k.f),
                    dc * k.i * (1.0 - k.g ** 2),
                    do * k.o * (1.0 - k.o),
                ],
                axis=1,
            )
            dW += dZ.T @ k.x
            dU += dZ.T @ k.h_prev
            db += dZ.sum(axis=0)
            dh_in = dZ @ U
            dh_next = dh_in if mh is None else dh_in * mh
            if d_below is not None:
                dx = dZ @ W
                d_below[:, t, :] = dx if mx is None else dx * mx
        grads[f"W{layer + 1}"], grads[f"U{layer + 1}"], grads[f"b{layer + 1}"] = dW, dU, db
        d_above = d_below
    return grads


def rmsprop_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: Mapping[str, np.ndarray] | None,
    lr: float,
    rho: float = 0.9,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """s <- rho*s + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(s) + eps)"""
    state = state or {}
    new_params, new_state = {}, {}
    for name, theta in params.items():
        g = grads[name]
        s = rho * state.get(name, np.zeros_like(theta)) + (1.0 - rho) * g * g
        new_state[name] = s
        new_params[name] = theta - lr * g / (np.sqrt(s) + eps)
    return new_params, new_state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class TrainReport:
    monitor: str
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_pr_auc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "max_epochs"

    @property
    def monitored(self) -> list[float]:
        return getattr(self, self.monitor)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": range(len(self.train_loss)),
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "val_accuracy": self.val_accuracy,
                "val_pr_auc": self.val_pr_auc,
            }
        )


@dataclass
class LSTMModel:
    config: LSTMConfig
    params: LSTMParams
    lookback: int
    channels: tuple[str, ...]
    metadata: dict = field(default_factory=dict)


def _windows_of(windows: WindowTensor | np.ndarray) -> np.ndarray:
    return windows.windows if isinstance(windows, WindowTensor) else np.asarray(windows, dtype=float)


def _check_windows(model: LSTMModel, windows: np.ndarray) -> None:
    if windows.ndim != 3:
        raise FeatureLayoutError(f"expected windows shaped (sample, lag, channel), got {windows.shape}")
    if windows.shape[1] != model.lookback:
        raise LookbackMismatchError(f"windows have lookback {windows.shape[1]}, model was trained with {model.lookback}")
    if windows.shape[2] != model.params.input_dim:
        raise FeatureLayoutError(f"windows have {windows.shape[2]} channels, model expects {model.params.input_dim}")


def _infer(params: LSTMParams, windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hidden = np.empty((windows.shape[0], params.hidden_dim))
    prob = np.empty(windows.shape[0])
    step = settings.INFER_BATCH_SIZE
    for start in range(0, windows.shape[0], step):
        fp = forward(windows[start:start + step], params, "infer")
        hidden[start:start + step] = fp.hidden
        prob[start:start + step] = fp.probability
    return hidden, prob


def extract_hidden(model: LSTMModel, windows: WindowTensor | np.ndarray) -> np.ndarray:
    """Final-step layer-2 hidden states, dropout off; shape (n_samples, n2)"""
    windows = _windows_of(windows)
    _check_windows(model, windows)
    return _infer(model.params, windows)[0]


def predict_proba(model: LSTMModel, windows: WindowTensor | np.ndarray) -> np.ndarray:
    windows = _windows_of(windows)
    _check_windows(model, windows)
    return _infer(model.params, windows)[1]


def _improved(monitor: str, value: float, best: float | None) -> bool:
    if best is None:
        return True
    if monitor == "val_loss":
        return value < best
    return value > best


def train(train_set: WindowTensor, val_set: WindowTensor, cfg: LSTMConfig) -> tuple[LSTMModel, TrainReport]:
    """RMSProp mini-batch training with early stopping; returns the best-epoch snapshot"""
    for name, tensor in (("train", train_set), ("validation", val_set)):
        if tensor.n_samples == 0 or tensor.labels is None:
            raise TrainingError(f"{name} windows are empty or unlabeled")
        if tensor.windows.shape[2] != cfg.input_dim:
            raise FeatureLayoutError(f"{name} windows have {tensor.windows.shape[2]} channels, config says {cfg.input_dim}")
    if val_set.lookback != train_set.lookback:
        raise LookbackMismatchError("train and validation windows use different lookbacks")

    init_rng, shuffle_rng, dropout_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    params = init_params(cfg, init_rng)
    state: dict[str, np.ndarray] | None = None
    X, y = train_set.windows, train_set.labels.astype(float)
    Xv, yv = val_set.windows, val_set.labels
    monitor = cfg.monitor
    if monitor == "val_pr_auc" and not yv.any():
        logger.warning("Validation windows hold no positive labels; early stopping monitors val_loss instead")
        monitor = "val_loss"
    report = TrainReport(monitor=monitor)
    best_value, best_params, wait = None, params.copy(), 0
    n = X.shape[0]
    logger.info(
        f"Training LSTM {cfg.layer_sizes[0]}x{cfg.layer_sizes[1]} on {n} windows "
        f"(lookback {train_set.lookback}, {cfg.input_dim} channel(s)), {Xv.shape[0]} validation windows"
    )

    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for batch_index, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            masks = sample_masks(cfg, idx.size, dropout_rng)
            fp = forward(X[idx], params, "train", masks)
            batch_loss = float(np.mean(loss(fp.probability, y[idx])))
            if not math.isfinite(batch_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            grads = backward(fp, y[idx])
            if cfg.clip_norm is not None:
                grads = clip_by_global_norm(grads, cfg.clip_norm)
            tensors, state = rmsprop_step(params.tensors, grads, state, cfg.learning_rate, cfg.rho, cfg.eps)
            params = LSTMParams(tensors)
            total += batch_loss * idx.size

        _, p_val = _infer(params, Xv)
        report.train_loss.append(total / n)
        report.val_loss.append(log_loss(p_val, yv))
        report.val_accuracy.append(accuracy_at_threshold(p_val, yv))
        report.val_pr_auc.append(pr_auc(p_val, yv)[1] if yv.any() else float("nan"))
        value = report.monitored[-1]
        logger.info(
            f"epoch {epoch}: train_loss={report.train_loss[-1]:.5f} val_loss={report.val_loss[-1]:.5f} "
            f"val_pr_auc={report.val_pr_auc[-1]:.5f}"
        )
        if _improved(report.monitor, value, best_value):
            best_value, best_params, wait = value, params.copy(), 0
            report.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience_epochs:
                report.stop_reason = "early_stopping"
                logger.info(f"Early stopping after epoch {epoch}; best epoch {report.best_epoch} ({report.monitor}={best_value:.5f})")
                break

    model = LSTMModel(
        config=copy.deepcopy(cfg),
        params=best_params,
        lookback=train_set.lookback,
        channels=tuple(train_set.channels),
    )
    return model, report
