"""Confusion-matrix scores for binary change maps (changed = positive class)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import UNDEFINED


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    oa: float
    f1: float
    kappa: float

    def as_dict(self) -> dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "oa": self.oa, "f1": self.f1, "kappa": self.kappa}

    def block(self) -> str:
        """``metric=value`` lines, four decimals."""
        return "\n".join(f"{k}={v:.4f}" for k, v in self.as_dict().items())


def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    valid = truth != UNDEFINED
    if not valid.any():
        raise ValueError("truth has no defined pixels")
    p = pred[valid] == 1
    t = truth[valid] == 1
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(p.size - tp - fp - fn)
    return ConfusionMatrix(tp, fp, tn, fn)


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def scores(cm: ConfusionMatrix) -> Scores:
    n = cm.total
    if n < 1:
        raise ValueError("empty confusion matrix")
    precision = _ratio(cm.tp, cm.tp + cm.fp)
    recall = _ratio(cm.tp, cm.tp + cm.fn)
    oa = (cm.tp + cm.tn) / n
    f1 = _ratio(2 * precision * recall, precision + recall)
    pred_pos, true_pos = cm.tp + cm.fp, cm.tp + cm.fn
    # exact integer form of (p_o - p_e) / (1 - p_e), one rounding at the end
    chance = pred_pos * true_pos + (n - pred_pos) * (n - true_pos)
    denom = n * n - chance
    kappa = 0.0 if denom == 0 else (n * (cm.tp + cm.tn) - chance) / denom
    return Scores(precision, recall, oa, f1, kappa)


def evaluate(pred: np.ndarray, truth: np.ndarray) -> Scores:
    return scores(confusion(pred, truth))
