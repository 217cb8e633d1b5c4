"""Evaluation metrics."""
import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def auc(scores, labels):
    """Area under the ROC curve as the Mann-Whitney statistic (ties count one half).

    2-D inputs are treated as multi-task: NaN labels are ignored and the result
    is the macro average over tasks that contain both classes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    if scores.ndim == 2:
        per_task = []
        for t in range(scores.shape[1]):
            keep = ~np.isnan(labels[:, t])
            y = labels[keep, t]
            if (y == 1).any() and (y == 0).any():
                per_task.append(auc(scores[keep, t], y))
        if not per_task:
            raise MetricError("no task has both classes present")
        return float(np.mean(per_task))
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != len(labels):
        raise MetricError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rmse(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise MetricError("rmse of an empty set")
    if pred.shape != target.shape:
        raise MetricError("rmse: length mismatch")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def mae(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.size == 0:
        raise MetricError("mae of an empty set")
    if pred.shape != target.shape:
        raise MetricError("mae: length mismatch")
    return float(np.mean(np.abs(pred - target)))


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("pearson needs two equal-length 1-D series")
    if len(x) < 3:
        raise MetricError("pearson needs at least 3 pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((dx * dx).sum()), np.sqrt((dy * dy).sum())
    if sx == 0 or sy == 0:
        raise MetricError("zero variance series")
    return float((dx * dy).sum() / (sx * sy))
