"""Evaluation metrics: hard Dice, matched Dice for unsupervised labelings,
and an intensity-histogram distance between image sets."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["dice", "dice_per_class", "dice_matrix", "matched_dice", "histogram_distance"]


def dice(a, b):
    """``2|A & B| / (|A| + |B|)`` for boolean masks; 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def dice_per_class(pred, truth, n_classes):
    """Dice of each class index between two integer label maps."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.array([dice(pred == k, truth == k) for k in range(n_classes)])


def dice_matrix(pred, truth, n_pred, n_true):
    return np.array([[dice(pred == i, truth == j) for j in range(n_true)]
                     for i in range(n_pred)])


def matched_dice(pred, truth, n_pred, n_true):
    """Per-true-class Dice after a one-to-one matching of predicted labels.

    Unsupervised labelings carry no class identity, so predicted labels are
    assigned to true classes by maximizing total Dice (Hungarian algorithm).
    True classes left without a partner score 0.

    Returns ``(scores, assignment)`` where ``assignment[j]`` is the predicted
    label matched to true class ``j`` or -1.
    """
    m = dice_matrix(np.asarray(pred), np.asarray(truth), n_pred, n_true)
    rows, cols = linear_sum_assignment(-m)
    scores = np.zeros(n_true)
    assignment = -np.ones(n_true, dtype=int)
    for i, j in zip(rows, cols):
        scores[j] = m[i, j]
        assignment[j] = i
    return scores, assignment


def histogram_distance(images_a, images_b, bins=64):
    """L1 distance between the pooled, normalized intensity histograms of two
    image sets over [0, 1]. Ranges from 0 (identical) to 2 (disjoint)."""
    edges = np.linspace(0.0, 1.0, bins + 1)

    def hist(images):
        vals = np.concatenate([np.ravel(im) for im in images])
        h, _ = np.histogram(np.clip(vals, 0, 1), bins=edges)
        return h / max(h.sum(), 1)

    return float(np.abs(hist(images_a) - hist(images_b)).sum())
