"""
Precision-recall evaluation: confusion counts, PR curve and PR-AUC
computed as average precision (step interpolation)
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import NoPositiveLabelsError

PROB_CLIP = 1e-12


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class PRCurve:
    """Points ordered by descending threshold, so recall is nondecreasing"""

    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"recall": self.recall, "precision": self.precision})

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.size} scores vs {labels.size} labels")
    if not scores.size:
        raise ValueError("need at least one sample")
    return scores, labels.astype(bool)


def confusion_at_threshold(scores, labels, threshold: float) -> ConfusionCounts:
    """A sample is predicted positive iff its score >= threshold"""
    scores, labels = _validate(scores, labels)
    predicted = scores >= threshold
    tp = int(np.sum(predicted & labels))
    fp = int(np.sum(predicted & ~labels))
    fn = int(np.sum(~predicted & labels))
    return ConfusionCounts(tp=tp, fp=fp, tn=int(scores.size) - tp - fp - fn, fn=fn)


def precision_recall(counts: ConfusionCounts) -> tuple[float, float]:
    if counts.tp + counts.fn == 0:
        raise NoPositiveLabelsError("recall is undefined without positive labels")
    predicted = counts.tp + counts.fp
    precision = 1.0 if predicted == 0 else counts.tp / predicted
    return precision, counts.tp / (counts.tp + counts.fn)


def pr_auc(scores, labels) -> tuple[PRCurve, float]:
    """
    Sweep thresholds at each distinct score, descending; tied scores form one
    threshold group. AUC = sum_k (R_k - R_{k-1}) * P_k.
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositiveLabelsError("PR-AUC needs at least one positive label")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    hits = np.cumsum(labels[order])
    # last index of every block of equal scores
    ends = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))
    tp = hits[ends].astype(float)
    predicted = (ends + 1).astype(float)
    precision = tp / predicted
    recall = tp / n_pos
    auc = float(np.sum(np.diff(recall, prepend=0.0) * precision))

    curve = PRCurve(
        recall=np.concatenate([[0.0], recall]),
        precision=np.concatenate([[1.0], precision]),
        thresholds=np.concatenate([[np.inf], sorted_scores[ends]]),
        auc=auc,
    )
    return curve, auc


def accuracy_at_threshold(scores, labels, threshold: float = 0.5) -> float:
    counts = confusion_at_threshold(scores, labels, threshold)
    return (counts.tp + counts.tn) / counts.total


def log_loss(probabilities, labels) -> float:
    p = np.clip(np.asarray(probabilities, dtype=float), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=float)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
