"""Lesion-level classification metrics: ROC AUC and thresholded confusion metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import MprkitError

METRICS = ("auc", "accuracy", "f1", "sensitivity", "specificity", "mcc")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, labels, predicted) -> "ConfusionCounts":
        y = np.asarray(labels, dtype=bool)
        p = np.asarray(predicted, dtype=bool)
        return cls(int(np.sum(y & p)), int(np.sum(~y & p)), int(np.sum(~y & ~p)), int(np.sum(y & ~p)))


def _as_arrays(labels, scores):
    y = np.asarray(labels).astype(bool).reshape(-1)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if y.size != s.size:
        raise MprkitError("labels and scores differ in length")
    return y, s


def roc_auc(labels, scores) -> float:
    """Area under the ROC curve via the midrank (Mann-Whitney) statistic; ties count one half."""
    y, s = _as_arrays(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MprkitError("AUC undefined")
    ranks = rankdata(s)  # average ranks for ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_curve(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) polyline from (0, 0) to (1, 1), one vertex per unique score threshold."""
    y, s = _as_arrays(labels, scores)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MprkitError("AUC undefined")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[last]
    fps = (last + 1) - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def _ratio(num, den):
    return num / den if den else math.nan


def metrics_from_counts(c: ConfusionCounts) -> dict[str, float]:
    denom = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = (c.tp * c.tn - c.fp * c.fn) / math.sqrt(denom) if denom else 0.0
    return {
        "accuracy": _ratio(c.tp + c.tn, c.n),
        "f1": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "mcc": mcc,
    }


def compute_metrics(labels, scores, threshold: float = 0.5) -> dict[str, float]:
    """AUC plus confusion metrics for predictions ``score > threshold``.

    AUC is NaN when only one class is present; so are sensitivity or
    specificity when their denominator is empty. MCC is 0 whenever a
    marginal count is 0.
    """
    y, s = _as_arrays(labels, scores)
    if y.size == 0:
        raise MprkitError("no samples")
    if not 0.0 < threshold < 1.0:
        raise MprkitError("threshold must lie in (0, 1)")
    try:
        auc = roc_auc(y, s)
    except MprkitError:
        auc = math.nan
    out = {"auc": auc}
    out.update(metrics_from_counts(ConfusionCounts.from_predictions(y, s > threshold)))
    return out
