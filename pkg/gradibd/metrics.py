# metrics.py
"""Ranking and thresholded classification metrics, and the Student-t interval."""
from typing import NamedTuple, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from gradibd.errors import EmptyTestSet, NoPositives, ShapeMismatch, SingleClass

DECISION_THRESHOLD = 0.5
CONFIDENCE = 0.95
CI_FORMULA = "mean +/- t(0.975, k-1) * sd / sqrt(k), sd with k-1 denominator"

ArrayLike = Union[Sequence[float], np.ndarray]


class MetricSummary(NamedTuple):
    mean: float
    ci_lo: float
    ci_hi: float


def _as_arrays(scores: ArrayLike, labels: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeMismatch(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if scores.size == 0:
        raise EmptyTestSet("no scores to evaluate")
    return scores, labels


def auroc(scores: ArrayLike, labels: ArrayLike) -> float:
    """Mann-Whitney AUROC: share of (positive, negative) pairs ranked correctly, ties count 1/2.

    Raises:
        SingleClass: If only one class is present.
    """
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = stats.rankdata(scores)  # midranks for ties
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores: ArrayLike, labels: ArrayLike) -> float:
    """Mean of the precision at the rank of each positive, scores descending.

    Tied scores keep their original order (stable sort).

    Raises:
        NoPositives: If there is no positive label.
    """
    scores, labels = _as_arrays(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.size + 1)
    return float(precision[hits == 1].sum() / n_pos)


def f1_at_threshold(scores: ArrayLike, labels: ArrayLike, threshold: float = DECISION_THRESHOLD) -> float:
    """F1 of the positive class when predicting positive for ``score >= threshold``; 0 without true positives."""
    scores, labels = _as_arrays(scores, labels)
    predicted = scores >= threshold
    tp = int(np.sum(predicted & (labels == 1)))
    fp = int(np.sum(predicted & (labels == 0)))
    fn = int(np.sum(~predicted & (labels == 1)))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def t_interval(values: ArrayLike, confidence: float = CONFIDENCE) -> MetricSummary:
    """Mean and two-sided Student-t confidence interval across fold values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise EmptyTestSet("no values to summarize")
    mean = float(values.mean())
    if values.size < 2 or np.all(values == values[0]):
        return MetricSummary(mean, mean, mean)
    sd = float(values.std(ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2.0, values.size - 1)) * sd / np.sqrt(values.size)
    return MetricSummary(mean, mean - half, mean + half)


def all_metrics(scores: ArrayLike, labels: ArrayLike, threshold: float = DECISION_THRESHOLD) -> dict:
    return {
        "auroc": auroc(scores, labels),
        "ap": average_precision(scores, labels),
        "f1": f1_at_threshold(scores, labels, threshold),
        "threshold": threshold,
    }
