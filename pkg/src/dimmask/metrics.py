"""Evaluation: logloss, rank-sum AUC, and relative cross-entropy.

RCE reports how much better the model's cross-entropy is than a naive
constant predictor emitting the training positive rate:
rce = (ce_baseline - ce_model) * 100 / ce_baseline.  Positive is better than
the baseline, 0 is the baseline itself, negative is worse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import softplus


@dataclass
class EvalReport:
    logloss: float
    auc: Optional[float]  # None when the labels are single-class
    rce: float
    rows: int
    positive_rate: float


def logloss_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    if logits.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(softplus(logits) - labels * logits))


def naive_baseline_ce(rate: float, labels: np.ndarray) -> float:
    """Cross-entropy of the constant predictor p = rate on these labels."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"rate must be inside (0, 1), got {rate}")
    if labels.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return float(-np.mean(labels * np.log(rate) + (1.0 - labels) * np.log(1.0 - rate)))


def rce(pred_ce: float, baseline_ce: float) -> float:
    if baseline_ce <= 0.0:
        raise ValueError(f"baseline cross-entropy must be > 0, got {baseline_ce}")
    return (baseline_ce - pred_ce) * 100.0 / baseline_ce


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank of their run."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(scores)]])
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)  # mean of ranks s+1..e
    return ranks


def auc(scores: np.ndarray, labels: np.ndarray) -> Optional[float]:
    """Rank-sum AUC (ties count half); None when only one class is present."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = int(np.sum(labels == 1.0))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    pos_rank_sum = float(np.sum(ranks[labels == 1.0]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate(logits: np.ndarray, labels: np.ndarray, train_rate: float) -> EvalReport:
    ll = logloss_from_logits(logits, labels)
    base = naive_baseline_ce(train_rate, labels)
    return EvalReport(
        logloss=ll,
        auc=auc(logits, labels),
        rce=rce(ll, base),
        rows=int(labels.shape[0]),
        positive_rate=float(np.mean(labels)),
    )
