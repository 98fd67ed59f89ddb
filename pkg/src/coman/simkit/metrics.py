"""Accuracy and distribution metrics used by evaluation and early stopping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

KL_BINS = 16
KL_SMOOTHING = 1e-9


def auc(labels, scores) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic, ties averaged."""
    labels = np.asarray(labels, dtype=float)
    scores = np.asarray(scores, dtype=float)
    n_pos = float(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mae(pred, truth) -> float:
    return float(np.mean(np.abs(np.asarray(pred) - np.asarray(truth))))


def mse(pred, truth) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2))


@dataclass(frozen=True)
class Correlation:
    value: float
    degenerate: bool = False


def pearson(x, y) -> Correlation:
    """Pearson correlation; a constant input yields 0 with the ``degenerate`` flag set."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return Correlation(0.0, True)
    dx, dy = x - x.mean(), y - y.mean()
    den = np.sqrt((dx * dx).sum() * (dy * dy).sum())
    if den == 0 or not np.isfinite(den):
        return Correlation(0.0, True)
    return Correlation(float(np.clip((dx * dy).sum() / den, -1.0, 1.0)))


def binned_mass(curves, grid, n_bins: int = KL_BINS, smoothing: float = KL_SMOOTHING) -> np.ndarray:
    """Normalize response curves into a distribution over equal-width treatment bins.

    ``curves`` has shape ``(..., G)`` sampled at ``grid``; the result has shape
    ``(..., n_bins)`` and each row sums to one.
    """
    curves = np.asarray(curves, dtype=float)
    grid = np.asarray(grid, dtype=float)
    lo, hi = grid[0], grid[-1]
    if hi > lo:
        idx = np.minimum(((grid - lo) / (hi - lo) * n_bins).astype(int), n_bins - 1)
    else:
        idx = np.zeros(grid.size, dtype=int)
    onehot = np.zeros((grid.size, n_bins))
    onehot[np.arange(grid.size), idx] = 1.0
    mass = curves @ onehot + smoothing
    return mass / mass.sum(axis=-1, keepdims=True)


def kl_divergence(p, q) -> np.ndarray:
    """Row-wise ``KL(p || q)`` for strictly positive distributions on the last axis."""
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    return np.sum(p * (np.log(p) - np.log(q)), axis=-1)


def curve_kl(pred_curves, true_curves, grid) -> np.ndarray:
    """Per-row KL from the true binned response mass to the predicted one."""
    return np.maximum(kl_divergence(binned_mass(true_curves, grid), binned_mass(pred_curves, grid)), 0.0)


def per_treatment_kl(treatment, observed, predicted, treatments) -> float:
    """KL between observed and predicted mean response per logged treatment value.

    Used on randomly treated data, where the per-treatment means estimate
    the population response curve without assignment bias.
    """
    treatment = np.asarray(treatment, dtype=float)
    obs = np.zeros(len(treatments))
    pre = np.zeros(len(treatments))
    for j, t in enumerate(treatments):
        sel = treatment == t
        if sel.any():
            obs[j] = np.mean(np.asarray(observed)[sel])
            pre[j] = np.mean(np.asarray(predicted)[sel])
    return float(curve_kl(pre[None], obs[None], treatments)[0])
