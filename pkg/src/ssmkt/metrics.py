from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def auc(preds, labels) -> float | None:
    """Area under the ROC curve via the Mann-Whitney statistic; ties count 1/2.

    Returns None when the labels contain a single class.
    """
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(preds)  # average ranks give ties half credit
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc(preds, labels, threshold: float = 0.5) -> float | None:
    """Fraction of correct thresholded predictions; p == threshold counts as positive."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if preds.size == 0:
        return None
    return float(np.mean((preds >= threshold) == labels))


def masked_metrics(preds, labels, mask) -> dict:
    mask = np.asarray(mask, dtype=bool)
    p = np.asarray(preds)[mask]
    y = np.asarray(labels)[mask]
    return {"auc": auc(p, y), "acc": acc(p, y), "n": int(mask.sum())}


def fmt_metric(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.6f}"
