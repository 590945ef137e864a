"""Accuracy and average precision."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from gff.errors import ContractError, UndefinedMetricError


def _prep(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.size == 0:
        raise UndefinedMetricError("metric over an empty set")
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores vs {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ContractError("labels must be 0 or 1")
    return s, y


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction correct, predicting fake (1) when ``score > threshold``."""
    s, y = _prep(scores, labels)
    return float(np.mean((s > threshold).astype(np.int64) == y))


def average_precision(scores, labels) -> float:
    """Precision averaged over positives, ranked by descending score.

    Items with equal scores form one block: every positive inside a tied
    block gets the precision measured at the end of the block, so the result
    does not depend on input order. This equals the step-wise
    ``sum((R_k - R_{k-1}) * P_k)`` over distinct thresholds. The sum is
    accumulated exactly in rationals and rounded once.
    """
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_cum = np.cumsum(y)[ends]
    seen = ends + 1
    tp_block = np.diff(np.r_[0, tp_cum])
    total = Fraction(0)
    for tb, tc, n in zip(tp_block.tolist(), tp_cum.tolist(), seen.tolist()):
        if tb:
            total += Fraction(tb * tc, n)
    return float(total / n_pos)
