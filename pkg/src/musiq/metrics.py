"""Correlation and error metrics for quality predictions."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .numerics import ContractError


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> Optional[float]:
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        return None
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ContractError("inputs differ in length")
    if len(x) < 2:
        raise ContractError("correlation needs at least two samples")
    return x, y


def pearson(x, y) -> float:
    """Linear correlation; 0.0 if either input has zero variance."""
    x, y = _pair(x, y)
    r = _pearson(x, y)
    return 0.0 if r is None else r


def spearman(x, y) -> float:
    """Rank correlation (Pearson on average ranks); 0.0 when degenerate."""
    x, y = _pair(x, y)
    r = _pearson(average_ranks(x), average_ranks(y))
    return 0.0 if r is None else r


def is_degenerate(x, y) -> bool:
    x, y = _pair(x, y)
    return bool(np.all(x == x[0]) or np.all(y == y[0]))


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def binary_accuracy(pred_scores, true_scores, threshold: float = 5.0) -> float:
    """Agreement of ``score >= threshold`` labels."""
    p = np.asarray(pred_scores) >= threshold
    t = np.asarray(true_scores) >= threshold
    return float(np.mean(p == t))
