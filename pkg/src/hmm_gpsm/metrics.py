"""Clustering metrics and timing."""

from __future__ import annotations

import time
from typing import Callable, TypeVar

import numpy as np
from scipy.optimize import linear_sum_assignment

R = TypeVar("R")


def agreement_matrix(pred, true, n_labels: int | None = None) -> np.ndarray:
    """Square contingency table over the union of label values, zero padded."""
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {true.size} labels")
    p_vals, p_idx = np.unique(pred, return_inverse=True)
    t_vals, t_idx = np.unique(true, return_inverse=True)
    size = max(p_vals.size, t_vals.size, n_labels or 0)
    table = np.zeros((size, size), dtype=int)
    np.add.at(table, (p_idx, t_idx), 1)
    return table


def munkres_accuracy(pred, true, n_labels: int | None = None) -> float:
    """Fraction of matches after the best one-to-one relabeling of ``pred``."""
    table = agreement_matrix(pred, true, n_labels)
    if table.sum() == 0:
        return 1.0
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / table.sum())


def cluster_count(assignments) -> int:
    """Number of distinct states used by hard assignments.

    A 2-D input is read as per-segment posteriors and reduced by argmax
    (lowest index wins ties).
    """
    a = np.asarray(assignments)
    if a.ndim == 2:
        a = np.argmax(a, axis=1)
    return int(np.unique(a).size)


def timed(fn: Callable[..., R], *args, **kwargs) -> tuple[R, float]:
    """Run ``fn`` and return its result with the elapsed monotonic seconds."""
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
