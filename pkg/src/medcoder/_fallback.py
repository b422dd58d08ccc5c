"""Pure-Python implementations of the compiled kernels in ``_core``."""

from __future__ import annotations

import numpy as np


def levenshtein(a: str, b: str) -> int:
    """Edit distance with unit insert, delete and substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    row = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, cb in enumerate(b, 1):
            cur = row[j]
            row[j] = min(prev + (ca != cb), cur + 1, row[j - 1] + 1)
            prev = cur
    return row[-1]


def levenshtein_many(anchor: str, candidates: list[str]) -> np.ndarray:
    return np.fromiter((levenshtein(anchor, c) for c in candidates), dtype=np.int64,
                       count=len(candidates))


def split_counts(X: np.ndarray, weights: np.ndarray, y: np.ndarray, rows: np.ndarray):
    Xs = X[rows].astype(np.float64)
    w = weights[rows]
    pos_mask = y[rows].astype(bool)
    return Xs[pos_mask].T @ w[pos_mask], Xs[~pos_mask].T @ w[~pos_mask]
