"""Accuracy, macro-F1 and one-vs-rest macro-AUC."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from ..errors import DegenerateValSet

log = logging.getLogger(__name__)

N_CLASSES = 3


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    macro_auc: float | None
    # classes missing from the true labels (excluded from macro-F1 and AUC)
    absent_classes: tuple[int, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "absent_classes": list(self.absent_classes),
        }


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean(y_true == y_pred))


def macro_f1(y_true, y_pred, n_classes: int = N_CLASSES) -> tuple[float, tuple[int, ...]]:
    """Unweighted mean F1 over classes present in ``y_true``.

    A present class that is never predicted and never hit scores 0.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    present = [c for c in range(n_classes) if np.any(y_true == c)]
    absent = tuple(c for c in range(n_classes) if c not in present)
    scores = []
    for c in present:
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)), absent


def binary_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks for ties."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateValSet("AUC needs both positive and negative samples")
    ranks = rankdata(scores, method="average")
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(y_true, proba, n_classes: int = N_CLASSES) -> float:
    """One-vs-rest AUC averaged over classes present in ``y_true``."""
    y_true, proba = np.asarray(y_true), np.asarray(proba, dtype=np.float64)
    present = [c for c in range(n_classes) if np.any(y_true == c)]
    if len(present) < 2:
        raise DegenerateValSet(f"only {len(present)} class present in the validation labels")
    return float(np.mean([binary_auc(y_true == c, proba[:, c]) for c in present]))


def compute_metrics(y_true, proba) -> Metrics:
    y_true = np.asarray(y_true, dtype=int)
    proba = np.asarray(proba, dtype=np.float64)
    if proba.ndim != 2 or proba.shape != (y_true.size, N_CLASSES):
        raise ValueError(f"probabilities must be shaped ({y_true.size}, {N_CLASSES}), got {proba.shape}")
    y_pred = proba.argmax(axis=1)
    f1, absent = macro_f1(y_true, y_pred)
    if absent:
        log.warning("classes %s absent from validation labels; excluded from macro averages", list(absent))
    try:
        auc = macro_auc(y_true, proba)
    except DegenerateValSet as exc:
        log.warning("macro-AUC undefined: %s", exc)
        auc = None
    return Metrics(accuracy=accuracy(y_true, y_pred), macro_f1=f1, macro_auc=auc, absent_classes=absent)
