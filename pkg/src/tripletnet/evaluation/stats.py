from __future__ import annotations

import itertools

import numpy as np


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def paired_significance(acc_a, acc_b) -> float:
    """Exact two-sided paired permutation test on the mean fold difference.

    Enumerates all 2**k sign assignments of the per-fold differences.
    """
    a, b = np.asarray(acc_a, dtype=np.float64), np.asarray(acc_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired test needs two equal-length 1-d vectors")
    k = len(a)
    if k < 2:
        raise ValueError("paired test needs at least two folds")
    if k > 20:
        raise ValueError("exact enumeration is limited to 20 folds")
    d = a - b
    observed = abs(d.mean())
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=k)))
    stats = np.abs(signs @ d) / k
    tol = 1e-12 * max(1.0, observed)
    return float(np.count_nonzero(stats >= observed - tol) / len(signs))
