"""Multi-label evaluation metrics.

All functions take ``scores`` and binary ``y`` of shape ``[N, C]``. Ranking
metrics (ranking loss, coverage, MAP, AUC) depend on scores only through
their order, so any strictly increasing transform leaves them unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)


@dataclass
class MetricReport:
    ranking_loss: float
    coverage: float
    map: float
    macro_auc: float
    macro_f1: float
    macro_fbeta: float
    threshold: float = 0.5
    beta: float = 2.0
    per_class_auc: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("Ranking loss", f"{self.ranking_loss:.4f}"),
            ("Coverage", f"{self.coverage:.3f}"),
            ("MAP", f"{100 * self.map:.2f}"),
            ("Macro AUC", f"{100 * self.macro_auc:.2f}"),
            ("Macro F1", f"{100 * self.macro_f1:.2f}"),
            (f"Macro F_beta={self.beta:g}", f"{100 * self.macro_fbeta:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows)


def _as_arrays(scores, y):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(y)
    if s.shape != t.shape or s.ndim != 2:
        raise ValueError(f"scores and labels must both be [N, C]; got {s.shape} and {t.shape}")
    return s, t.astype(bool)


def ranking_loss(scores, y) -> float:
    """Mean fraction of (positive, negative) label pairs ranked in the wrong order.

    Ties count one half. Samples without both a positive and a negative are skipped.
    """
    s, t = _as_arrays(scores, y)
    losses = []
    for row, lab in zip(s, t):
        pos, neg = row[lab], row[~lab]
        if len(pos) == 0 or len(neg) == 0:
            continue
        diff = pos[:, None] - neg[None, :]
        bad = (diff < 0).sum() + 0.5 * (diff == 0).sum()
        losses.append(bad / (len(pos) * len(neg)))
    return float(np.mean(losses)) if losses else 0.0


def coverage(scores, y) -> float:
    """Mean 1-based rank depth needed to reach every positive label (ties rank worst)."""
    s, t = _as_arrays(scores, y)
    depths = []
    for row, lab in zip(s, t):
        if not lab.any():
            continue
        lowest = row[lab].min()
        depths.append(float((row >= lowest).sum()))
    return float(np.mean(depths)) if depths else 0.0


def average_precision(scores, y) -> float:
    """Average over positives of precision at that positive's score threshold."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(y).astype(bool)
    n_pos = t.sum()
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="stable")
    s_sorted, t_sorted = s[order], t[order]
    # last index of each tie group gives counts of items with score >= s
    _, first = np.unique(-s_sorted, return_index=True)
    group_end = np.append(first[1:], len(s_sorted)) - 1
    cum_pos = np.cumsum(t_sorted)
    group_id = np.searchsorted(first, np.arange(len(s_sorted)), side="right") - 1
    end = group_end[group_id]
    prec = cum_pos[end] / (end + 1)
    return float(prec[t_sorted].mean())


def map_macro(scores, y) -> float:
    s, t = _as_arrays(scores, y)
    aps = [average_precision(s[:, c], t[:, c]) for c in range(s.shape[1]) if t[:, c].any()]
    skipped = s.shape[1] - len(aps)
    if skipped:
        log.info("MAP: excluded %d class(es) without positives", skipped)
    return float(np.mean(aps)) if aps else 0.0


def roc_auc(scores, y) -> float:
    """ROC-AUC via the mid-rank statistic (ties count one half)."""
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(y).astype(bool)
    n_pos, n_neg = t.sum(), (~t).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def per_class_auc(scores, y) -> list[float]:
    s, t = _as_arrays(scores, y)
    return [roc_auc(s[:, c], t[:, c]) for c in range(s.shape[1])]


def auc_macro(scores, y) -> float:
    aucs = [a for a in per_class_auc(scores, y) if not np.isnan(a)]
    skipped = np.shape(scores)[1] - len(aucs)
    if skipped:
        log.info("AUC: excluded %d degenerate class(es)", skipped)
    return float(np.mean(aucs)) if aucs else 0.0


def f_beta_counts(tp: float, fp: float, fn: float, beta: float) -> float:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    denom = beta**2 * p + r
    return (1 + beta**2) * p * r / denom if denom > 0 else 0.0


def f_macro(scores, y, threshold: float = 0.5, beta: float = 1.0) -> float:
    s, t = _as_arrays(scores, y)
    pred = s >= threshold
    vals = []
    for c in range(s.shape[1]):
        tp = float((pred[:, c] & t[:, c]).sum())
        fp = float((pred[:, c] & ~t[:, c]).sum())
        fn = float((~pred[:, c] & t[:, c]).sum())
        vals.append(f_beta_counts(tp, fp, fn, beta))
    return float(np.mean(vals))


def compute_report(scores, y, threshold: float = 0.5, beta: float = 2.0) -> MetricReport:
    s, t = _as_arrays(scores, y)
    return MetricReport(
        ranking_loss=ranking_loss(s, t),
        coverage=coverage(s, t),
        map=map_macro(s, t),
        macro_auc=auc_macro(s, t),
        macro_f1=f_macro(s, t, threshold, 1.0),
        macro_fbeta=f_macro(s, t, threshold, beta),
        threshold=threshold,
        beta=beta,
        per_class_auc=per_class_auc(s, t),
    )
