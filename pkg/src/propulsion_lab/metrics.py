"""Evaluation metrics: accuracy, F1, MCC, Pearson and Spearman."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import DataError


@dataclass
class MetricReport:
    accuracy: float | None = None
    f1: float | None = None
    mcc: float | None = None
    pearson: float | None = None
    spearman: float | None = None
    degenerate: bool = False

    def as_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


def confusion_counts(pred, target, positive=1):
    pred = np.asarray(pred)
    target = np.asarray(target)
    tp = int(np.sum((pred == positive) & (target == positive)))
    tn = int(np.sum((pred != positive) & (target != positive)))
    fp = int(np.sum((pred == positive) & (target != positive)))
    fn = int(np.sum((pred != positive) & (target == positive)))
    return tp, tn, fp, fn


def mcc_from_counts(tp, tn, fp, fn):
    """Returns ``(mcc, degenerate)``; a zero denominator yields ``(0.0, True)``."""
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0, True
    return (tp * tn - fp * fn) / math.sqrt(denom), False


def f1_from_counts(tp, tn, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def accuracy(pred, target) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    return float(np.mean(pred == target))


def mcc(pred, target):
    """Binary MCC from the confusion counts; the multiclass generalisation otherwise."""
    pred, target = np.asarray(pred), np.asarray(target)
    labels = np.union1d(pred, target)
    if np.all(np.isin(labels, (0, 1))):
        return mcc_from_counts(*confusion_counts(pred, target))
    k = int(labels.max()) + 1
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (target, pred), 1)
    s = conf.sum()
    c = np.trace(conf)
    p_k = conf.sum(axis=0)
    t_k = conf.sum(axis=1)
    denom = float(s * s - p_k @ p_k) * float(s * s - t_k @ t_k)
    if denom == 0:
        return 0.0, True
    return float(c * s - t_k @ p_k) / math.sqrt(denom), False


def f1(pred, target) -> float:
    """Binary F1 for the positive class 1; macro average over classes when more than two."""
    pred, target = np.asarray(pred), np.asarray(target)
    labels = np.union1d(pred, target)
    if np.all(np.isin(labels, (0, 1))):
        return f1_from_counts(*confusion_counts(pred, target))
    return float(np.mean([f1_from_counts(*confusion_counts(pred, target, c)) for c in labels]))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise DataError(f"pearson: lengths differ ({len(x)} vs {len(y)})")
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc) / denom if denom else 0.0


def spearman(x, y) -> float:
    """Rank correlation ``1 - 6 sum d^2 / (n (n^2 - 1))``.

    With ties, ranks are averaged and the coefficient is the Pearson
    correlation of the ranks (the closed form assumes distinct ranks).
    """
    rx = kernels.average_ranks(x)
    ry = kernels.average_ranks(y)
    n = len(rx)
    if n < 2:
        return 0.0
    if len(np.unique(rx)) == n and len(np.unique(ry)) == n:
        d = rx - ry
        return 1.0 - 6.0 * float(d @ d) / (n * (n * n - 1))
    return pearson(rx, ry)


def compute_metrics(predictions, targets, task="classification") -> MetricReport:
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.size == 0:
        raise DataError("no predictions to score")
    if predictions.shape != targets.shape:
        raise DataError(f"predictions {predictions.shape} vs targets {targets.shape}")
    if task == "regression":
        return MetricReport(pearson=pearson(predictions, targets), spearman=spearman(predictions, targets))
    m, degenerate = mcc(predictions, targets)
    return MetricReport(
        accuracy=accuracy(predictions, targets), f1=f1(predictions, targets), mcc=m, degenerate=degenerate
    )
