"""Normalized entropy, AUC and the evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels

PRED_CLAMP = 1e-12


def _labels(labels):
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.size == 0 or np.all(y == y[0]):
        raise DegenerateLabels("need at least one positive and one negative label")
    return y


def ne(predictions, labels) -> float:
    """Mean log-loss divided by the log-loss of predicting the label mean."""
    y = _labels(labels)
    p = np.clip(np.asarray(predictions, dtype=np.float64).ravel(), PRED_CLAMP, 1 - PRED_CLAMP)
    ce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    base = y.mean()
    base_ce = -(base * np.log(base) + (1 - base) * np.log(1 - base))
    return float(ce / base_ce)


def auc(predictions, labels) -> float:
    """P(random positive outranks random negative), ties count one half."""
    y = _labels(labels)
    ranks = rankdata(np.asarray(predictions, dtype=np.float64).ravel())
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def expected_auc(scores, probabilities) -> float:
    """Expected AUC of `scores` when labels are Bernoulli(`probabilities`).

    Pairs are weighted by ``p_i (1 - p_j)``; computed in O(n log n) by sorting.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    order = np.argsort(s, kind="stable")
    s, p = s[order], p[order]
    neg = 1 - p
    # group ties so they earn half credit
    uniq, start = np.unique(s, return_index=True)
    group_neg = np.add.reduceat(neg, start)
    group_pos = np.add.reduceat(p, start)
    below = np.concatenate([[0.0], np.cumsum(group_neg)[:-1]])
    wins = np.sum(group_pos * below) + 0.5 * np.sum(group_pos * group_neg - np.add.reduceat(p * neg, start))
    total = p.sum() * neg.sum() - np.sum(p * neg)
    if total <= 0:
        raise DegenerateLabels("label probabilities leave no positive/negative pairs")
    return float(wins / total)


def auc_standard_error(auc_value, n_pos, n_neg) -> float:
    """Hanley-McNeil standard error of an AUC estimate."""
    a = auc_value
    q1 = a / (2 - a)
    q2 = 2 * a * a / (1 + a)
    var = (a * (1 - a) + (n_pos - 1) * (q1 - a * a) + (n_neg - 1) * (q2 - a * a)) / (n_pos * n_neg)
    return float(np.sqrt(max(var, 0.0)))


DEFAULT_BUCKETS = (0, 64, 128, 256, 512, 1024)


@dataclass
class EvalReport:
    auc: float
    ne: float
    count: int
    buckets: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(predictions, labels, history_lengths=None, edges=DEFAULT_BUCKETS) -> EvalReport:
    """Overall NE/AUC plus a breakdown by history-length bucket.

    Buckets with a single label class report null metrics.
    """
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    report = EvalReport(auc=auc(p, y), ne=ne(p, y), count=int(y.size))
    if history_lengths is not None:
        lengths = np.asarray(history_lengths).ravel()
        bounds = list(edges) + [np.inf]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sel = (lengths >= lo) & (lengths < hi)
            if not sel.any():
                continue
            entry = {"min_len": int(lo), "max_len": None if np.isinf(hi) else int(hi), "count": int(sel.sum()),
                     "auc": None, "ne": None}
            try:
                entry["auc"] = auc(p[sel], y[sel])
                entry["ne"] = ne(p[sel], y[sel])
            except DegenerateLabels:
                pass
            report.buckets.append(entry)
    return report
