"""
Second-order gradient boosted trees with a logistic objective

Exact greedy split search with sparsity-aware default directions: rows with
a missing (NaN) feature value follow the direction that maximized gain when
the split was chosen. A row goes left iff x < threshold.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit, logit

from .errors import FeatureLayoutError, TrainingError
from .features import FeatureMatrix
from .metrics import log_loss, pr_auc

logger = logging.getLogger(__name__)


class GBTConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(default=0.02, gt=0.0)
    max_depth: int = Field(default=6, ge=1)
    subsample: float = Field(default=0.5, gt=0.0, le=1.0)
    reg_lambda: float = Field(default=1.0, ge=0.0)
    gamma: float = Field(default=0.0, ge=0.0)
    min_child_weight: float = Field(default=1.0, ge=0.0)
    max_rounds: int = Field(default=300, ge=1)
    patience_rounds: int = Field(default=5, ge=1)
    base_score: float = Field(default=0.5, gt=0.0, lt=1.0)
    track_pr_auc: bool = False
    seed: int = 0


@dataclass
class TreeNode:
    weight: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    default_left: bool = True
    left: TreeNode | None = None
    right: TreeNode | None = None
    gain: float = 0.0
    cover: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def leaves(self) -> Iterator[TreeNode]:
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def preorder(self) -> Iterator[TreeNode]:
        yield self
        if not self.is_leaf:
            yield from self.left.preorder()
            yield from self.right.preorder()

    def route_left(self, x: np.ndarray) -> np.ndarray:
        return np.where(np.isnan(x), self.default_left, x < self.threshold)

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        self._fill(X, np.arange(X.shape[0]), out)
        return out

    def _fill(self, X: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
        if self.is_leaf:
            out[rows] = self.weight
            return
        go_left = self.route_left(X[rows, self.feature])
        self.left._fill(X, rows[go_left], out)
        self.right._fill(X, rows[~go_left], out)


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    default_left: bool
    gain: float


def logistic_grad_hess(margin, label):
    """g = p - y, h = p(1 - p) with p = logistic(margin)"""
    p = expit(np.asarray(margin, dtype=float))
    return p - np.asarray(label, dtype=float), p * (1.0 - p)


def split_gain(GL, HL, GR, HR, reg_lambda: float, gamma: float):
    return 0.5 * (
        GL ** 2 / (HL + reg_lambda) + GR ** 2 / (HR + reg_lambda) - (GL + GR) ** 2 / (HL + HR + reg_lambda)
    ) - gamma


def leaf_weight(G: float, H: float, reg_lambda: float) -> float:
    denom = H + reg_lambda
    return 0.0 if denom <= 0 else -G / denom


def find_best_split(X: np.ndarray, g: np.ndarray, h: np.ndarray, rows: np.ndarray, cfg: GBTConfig) -> SplitCandidate | None:
    """
    Scan midpoints between consecutive distinct observed values of every
    feature, trying missing rows on both sides. Equal gains resolve to the
    lowest feature index, then the lowest threshold, then missing-left.
    """
    rows = np.asarray(rows)
    if rows.size < 2:
        return None
    Xn = X[rows]
    gn, hn = g[rows], h[rows]
    G, H = gn.sum(), hn.sum()

    # NaN sorts last, so observed values form a prefix of every column
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    present = ~np.isnan(xs)
    gs = np.where(present, gn[order], 0.0)
    hs = np.where(present, hn[order], 0.0)
    cg, ch = np.cumsum(gs, axis=0), np.cumsum(hs, axis=0)
    G_miss = np.where(present, 0.0, gn[order]).sum(axis=0)
    H_miss = np.where(present, 0.0, hn[order]).sum(axis=0)

    valid = present[1:] & (xs[1:] != xs[:-1])
    if not valid.any():
        return None
    with np.errstate(invalid="ignore"):
        thresholds = 0.5 * (xs[:-1] + xs[1:])
        thresholds = np.where(thresholds > xs[:-1], thresholds, xs[1:])

    lam, mcw = cfg.reg_lambda, cfg.min_child_weight
    gains = np.full((Xn.shape[1], rows.size - 1, 2), -np.inf)
    for d, missing_left in enumerate((True, False)):
        GL = cg[:-1] + (G_miss if missing_left else 0.0)
        HL = ch[:-1] + (H_miss if missing_left else 0.0)
        GR, HR = G - GL, H - HL
        ok = valid & (HL >= mcw) & (HR >= mcw)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = split_gain(GL, HL, GR, HR, lam, cfg.gamma)
        gains[:, :, d] = np.where(ok, gain, -np.inf).T

    best = int(np.argmax(gains))
    feature, k, d = np.unravel_index(best, gains.shape)
    gain = float(gains[feature, k, d])
    if not gain > 0.0:
        return None
    return SplitCandidate(int(feature), float(thresholds[k, feature]), bool(d == 0), gain)


def build_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, cfg: GBTConfig, mask: np.ndarray | None = None) -> TreeNode:
    """Greedy growth to max_depth; leaves hold -G/(H + lambda) over their rows"""
    rows = np.arange(X.shape[0]) if mask is None else np.flatnonzero(mask)
    if not rows.size:
        raise ValueError("build_tree needs at least one selected row")
    return _grow(X, g, h, rows, cfg, 0)


def _grow(X, g, h, rows, cfg: GBTConfig, depth: int) -> TreeNode:
    G, H = float(g[rows].sum()), float(h[rows].sum())
    node = TreeNode(weight=leaf_weight(G, H, cfg.reg_lambda), cover=H)
    if depth >= cfg.max_depth:
        return node
    split = find_best_split(X, g, h, rows, cfg)
    if split is None:
        return node
    node.feature, node.threshold = split.feature, split.threshold
    node.default_left, node.gain = split.default_left, split.gain
    go_left = node.route_left(X[rows, split.feature])
    node.left = _grow(X, g, h, rows[go_left], cfg, depth + 1)
    node.right = _grow(X, g, h, rows[~go_left], cfg, depth + 1)
    return node


@dataclass
class BoostingReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_pr_auc: list[float] = field(default_factory=list)
    best_round: int = 0
    stop_reason: str = "max_rounds"

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(
            {"round": range(len(self.train_loss)), "train_loss": self.train_loss, "val_loss": self.val_loss}
        )
        if self.val_pr_auc:
            frame["val_pr_auc"] = self.val_pr_auc
        return frame


@dataclass
class GBTModel:
    base_margin: float
    trees: list[TreeNode]
    learning_rate: float
    feature_names: tuple[str, ...]
    config: GBTConfig | None = None
    metadata: dict = field(default_factory=dict)


def _design(model: GBTModel, matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
    if isinstance(matrix, FeatureMatrix):
        if matrix.columns != model.feature_names:
            if set(matrix.columns) != set(model.feature_names):
                extra = sorted(set(matrix.columns) ^ set(model.feature_names))
                raise FeatureLayoutError(f"feature layout differs from the model's: {', '.join(extra[:10])}")
            matrix = matrix.select(model.feature_names)
        return matrix.values
    X = np.asarray(matrix, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise FeatureLayoutError(f"expected {len(model.feature_names)} feature columns, got shape {X.shape}")
    return X


def predict_margin(model: GBTModel, matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
    X = _design(model, matrix)
    margin = np.full(X.shape[0], model.base_margin)
    for tree in model.trees:
        margin += model.learning_rate * tree.predict(X)
    return margin


def predict_proba(model: GBTModel, matrix: FeatureMatrix | np.ndarray) -> np.ndarray:
    return expit(predict_margin(model, matrix))


def feature_importance(model: GBTModel) -> dict[str, float]:
    """Total split gain per feature over every internal node; unused features get 0"""
    totals = np.zeros(len(model.feature_names))
    for tree in model.trees:
        for node in tree.preorder():
            if not node.is_leaf:
                totals[node.feature] += node.gain
    return dict(zip(model.feature_names, totals.tolist()))


def _labels(matrix: FeatureMatrix, name: str) -> np.ndarray:
    if matrix.n_rows == 0 or matrix.labels is None:
        raise TrainingError(f"{name} matrix is empty or unlabeled")
    return matrix.labels.astype(float)


def train(train_set: FeatureMatrix, val_set: FeatureMatrix, cfg: GBTConfig) -> tuple[GBTModel, BoostingReport]:
    """Newton boosting with row subsampling and early stopping on validation log-loss"""
    y, yv = _labels(train_set, "train"), _labels(val_set, "validation")
    if val_set.columns != train_set.columns:
        raise FeatureLayoutError("train and validation matrices have different columns")
    X, Xv = train_set.values, val_set.values
    n = X.shape[0]
    rng = np.random.default_rng(cfg.seed)
    n_sub = max(1, int(math.floor(cfg.subsample * n + 0.5)))
    base = float(logit(cfg.base_score))
    margin, val_margin = np.full(n, base), np.full(Xv.shape[0], base)

    trees: list[TreeNode] = []
    report = BoostingReport()
    best, wait = math.inf, 0
    logger.info(f"Boosting on {n} rows x {X.shape[1]} features, {Xv.shape[0]} validation rows")
    for r in range(cfg.max_rounds):
        g, h = logistic_grad_hess(margin, y)
        mask = None
        if cfg.subsample < 1.0:
            mask = np.zeros(n, dtype=bool)
            mask[rng.choice(n, size=n_sub, replace=False)] = True
        tree = build_tree(X, g, h, cfg, mask)
        margin += cfg.learning_rate * tree.predict(X)
        val_margin += cfg.learning_rate * tree.predict(Xv)
        if not (np.all(np.isfinite(margin)) and np.all(np.isfinite(val_margin))):
            raise TrainingError(f"non-finite margin at boosting round {r}")
        trees.append(tree)

        p_val = expit(val_margin)
        report.train_loss.append(log_loss(expit(margin), y))
        report.val_loss.append(log_loss(p_val, yv))
        if cfg.track_pr_auc:
            report.val_pr_auc.append(pr_auc(p_val, yv)[1] if yv.any() else float("nan"))
        logger.debug(f"round {r}: train_loss={report.train_loss[-1]:.6f} val_loss={report.val_loss[-1]:.6f}")

        if report.val_loss[-1] < best:
            best, wait, report.best_round = report.val_loss[-1], 0, r
        else:
            wait += 1
            if wait >= cfg.patience_rounds:
                report.stop_reason = "early_stopping"
                break

    logger.info(
        f"Boosting stopped ({report.stop_reason}) after {len(trees)} rounds; "
        f"best round {report.best_round} val_loss={best:.6f}"
    )
    model = GBTModel(
        base_margin=base,
        trees=trees[: report.best_round + 1],
        learning_rate=cfg.learning_rate,
        feature_names=tuple(train_set.columns),
        config=copy.deepcopy(cfg),
    )
    return model, report
