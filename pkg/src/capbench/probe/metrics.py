"""Accuracy, unweighted average recall and equal error rate."""

from __future__ import annotations

import numpy as np

METRIC_KINDS = ("accuracy", "uar", "eer")


class MetricError(ValueError):
    pass


def accuracy(pred, labels) -> float:
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels))


def uar(pred, labels, classes=None) -> float:
    """Mean of per-class recall over the classes present in ``labels``."""
    pred, labels = np.asarray(pred), np.asarray(labels)
    classes = np.unique(labels) if classes is None else classes
    recalls = [np.mean(pred[labels == c] == c) for c in classes if np.any(labels == c)]
    return float(np.mean(recalls))


def eer(scores, is_positive) -> float:
    """Equal error rate with linear interpolation between adjacent thresholds.

    A trial is accepted when ``score >= threshold``.  Thresholds run over the
    sorted unique scores plus +inf; the false-accept and false-reject curves
    are interpolated linearly between the two operating points that bracket
    their crossing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("eer needs both positive and negative trials")
    thr = np.append(np.unique(scores), np.inf)
    pos_sorted, neg_sorted = np.sort(scores[pos]), np.sort(scores[~pos])
    frr = np.searchsorted(pos_sorted, thr, side="left") / n_pos
    far = (n_neg - np.searchsorted(neg_sorted, thr, side="left")) / n_neg
    d = frr - far
    k = int(np.argmax(d >= 0))
    if d[k] == 0 or k == 0:
        return float(far[k])
    a = -d[k - 1] / (d[k] - d[k - 1])
    return float(far[k - 1] + a * (far[k] - far[k - 1]))


def higher_is_better(kind: str) -> bool:
    return kind != "eer"


def as_accuracy_like(value: float, kind: str) -> float:
    """Aggregation scale: EER enters as 1 - EER."""
    return 1.0 - value if kind == "eer" else value


def metric(kind: str, labels, pred=None, scores=None, positive=None) -> float:
    if kind == "accuracy":
        return accuracy(pred, labels)
    if kind == "uar":
        return uar(pred, labels)
    if kind == "eer":
        if scores is None:
            raise MetricError("eer requires real-valued positive-class scores")
        labels = np.asarray(labels)
        if len(np.unique(labels)) < 2:
            raise MetricError("eer needs both positive and negative trials")
        return eer(scores, labels == positive)
    raise MetricError(f"unknown metric kind {kind!r}")
