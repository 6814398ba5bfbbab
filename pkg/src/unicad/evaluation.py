"""Classification metrics and the DEAR deployment-efficiency ratio."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import InputError, NumericError


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise InputError("accuracy needs equal-length, non-empty prediction and label vectors")
    return float(np.mean(preds == labels))


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    scores = []
    for k in range(num_classes):
        tp = np.sum((preds == k) & (labels == k))
        fp = np.sum((preds == k) & (labels != k))
        fn = np.sum((preds != k) & (labels == k))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2 * tp / denom)
    return float(np.mean(scores))


def auc(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney rank statistic, ties given midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("auc needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average method = midranks
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_label_auc(score_matrix, label_matrix):
    """Column-wise AUC and their mean.

    Columns where only one class is present yield ``nan`` and are left out of
    the mean. Returns ``(per_column, mean)``.
    """
    s = np.asarray(score_matrix, dtype=np.float64)
    y = np.asarray(label_matrix)
    if s.ndim == 1:
        s, y = s[:, None], y[:, None]
    out = np.full(s.shape[1], np.nan)
    for j in range(s.shape[1]):
        col = y[:, j].astype(bool)
        if col.any() and not col.all():
            out[j] = auc(s[:, j], col)
    defined = out[~np.isnan(out)]
    mean = float(defined.mean()) if defined.size else float("nan")
    return out, mean


@dataclass
class DearInputs:
    acc_m: np.ndarray
    acc_baseline: np.ndarray
    mem_m: np.ndarray
    mem_baseline_single: float
    k: float = 3.0

    def __post_init__(self):
        self.acc_m = np.asarray(self.acc_m, dtype=np.float64)
        self.acc_baseline = np.asarray(self.acc_baseline, dtype=np.float64)
        self.mem_m = np.asarray(self.mem_m, dtype=np.float64)
        n = self.acc_m.size
        if n < 1 or self.acc_baseline.size != n or self.mem_m.size != n:
            raise InputError("DEAR inputs need N >= 1 tasks with matching vector lengths")
        for name, v in (("acc_m", self.acc_m), ("acc_baseline", self.acc_baseline)):
            if np.any((v < 0) | (v > 1)):
                raise InputError(f"{name} must lie in [0, 1]")
        if np.any(self.mem_m <= 0) or self.mem_baseline_single <= 0:
            raise InputError("memory values must be positive")

    @property
    def task_count(self) -> int:
        return self.acc_m.size


def dear(inputs: DearInputs) -> float:
    """(sum acc_m / sum acc_baseline)^k / (sum mem_m / (N * mem_baseline_single)).

    ``mem_m[i]`` is the whole-system memory while serving task ``i``.
    """
    acc_base = inputs.acc_baseline.sum()
    if acc_base == 0:
        raise NumericError("baseline accuracy sum is zero")
    efficacy = (inputs.acc_m.sum() / acc_base) ** inputs.k
    allocation = inputs.mem_m.sum() / (inputs.task_count * inputs.mem_baseline_single)
    if allocation == 0 or not math.isfinite(allocation):
        raise NumericError("memory ratio is zero or non-finite")
    return float(efficacy / allocation)
