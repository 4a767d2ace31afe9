"""Scoring utilities: ROC-AUC via the Mann-Whitney rank sum, accuracy, leak AUC."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    return scores, pos, n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Tied pairs count one half. Computed from average ranks in O(n log n).
    """
    scores, pos, n_pos, n_neg = _binary(scores, labels)
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def leak_auc(scores, labels) -> float:
    """Orientation-free leakage: ``max(auc, 1 - auc)``."""
    auc = roc_auc(scores, labels)
    return max(auc, 1.0 - auc)


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty prediction vector")
    return float(np.mean(pred == truth))
