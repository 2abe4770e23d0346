"""Ranking metrics with "incorrect" (label 1) as the positive class.

Records are ranked by descending score with ties broken by ascending
original index, so both metrics are deterministic even for tied scores.
PR-AUC is the step-wise average precision, not a trapezoidal area.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

R_AT_P_GRID = (0.7, 0.8, 0.9, 0.95)


class MetricError(ValueError):
    pass


def _ranked(scores: Sequence[float], labels: Sequence[int]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape or s.size == 0:
        raise MetricError("scores and labels must be equal-length non-empty 1-d sequences")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    if not y.any():
        raise MetricError("undefined PR-AUC: no positive labels")
    order = np.argsort(-s, kind="stable")
    return y[order].astype(np.int64)


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: sum over ranks k of (R_k - R_{k-1}) * P_k."""
    y = _ranked(scores, labels)
    tp = np.cumsum(y)
    k = np.arange(1, y.size + 1)
    return float(np.sum((tp / k)[y == 1]) / tp[-1])


def recall_at_precision(scores: Sequence[float], labels: Sequence[int], min_precision: float) -> float:
    """Largest recall over all cut-offs whose precision is at least ``min_precision``."""
    if not 0.0 < min_precision <= 1.0:
        raise MetricError(f"min_precision must lie in (0, 1], got {min_precision}")
    y = _ranked(scores, labels)
    tp = np.cumsum(y)
    k = np.arange(1, y.size + 1)
    ok = tp / k >= min_precision
    if not ok.any():
        return 0.0
    return float(tp[ok].max() / tp[-1])


def metric_report(scores: Sequence[float], labels: Sequence[int],
                  grid: Sequence[float] = R_AT_P_GRID) -> dict:
    return {
        "pr_auc": pr_auc(scores, labels),
        "r_at_p": {str(p): recall_at_precision(scores, labels, p) for p in grid},
    }
