"""Detection and localization metrics."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .localize import eval_percentile, threshold_stas, window_localize

log = logging.getLogger(__name__)

SWEEP_PCTS = (0, 25, 50, 75, 100)


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    auc: float | None = None
    ips: float | None = None
    per_segment: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def point_metrics(pred, truth, restrict_to_true_anomalous_steps: bool = False) -> tuple[float, float, float]:
    """Cell-wise precision, recall and F1.

    With ``restrict_to_true_anomalous_steps`` only rows where the truth has
    an anomaly are counted.
    """
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if restrict_to_true_anomalous_steps:
        rows = truth.any(axis=1) if truth.ndim == 2 else truth
        pred, truth = pred[rows], truth[rows]
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    return prf(tp, fp, fn)


def auc(scores, truth) -> float:
    """ROC AUC as the Mann-Whitney statistic with ties counted as one half."""
    scores = np.asarray(scores, dtype=float).ravel()
    truth = np.asarray(truth).astype(bool).ravel()
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ips(truth_dims, pred_dims, weights=None) -> float:
    """Interpretation score: weighted mean over segments of |G & P| / |G|.

    Segments with empty ground truth are skipped and the weights renormalized.
    """
    truth_dims = [set(g) for g in truth_dims]
    pred_dims = [set(p) for p in pred_dims]
    if len(truth_dims) != len(pred_dims) or not truth_dims:
        raise ValueError("need matching, non-empty lists of segments")
    w = np.full(len(truth_dims), 1.0) if weights is None else np.asarray(weights, dtype=float)
    keep = [i for i, g in enumerate(truth_dims) if g]
    if len(keep) < len(truth_dims):
        log.warning("skipping %d segment(s) with no ground-truth dimensions", len(truth_dims) - len(keep))
    if not keep:
        raise ValueError("no segment has ground-truth dimensions")
    w = w[keep] / w[keep].sum()
    ratios = [len(truth_dims[i] & pred_dims[i]) / len(truth_dims[i]) for i in keep]
    return float(np.dot(w, ratios))


def decide_rows(scores: np.ndarray, truth: np.ndarray, threshold: float | None) -> np.ndarray:
    """Threshold score rows: fixed absolute threshold, or keep the top a_t cells (a_t from truth)."""
    if threshold is not None:
        return (scores > threshold).astype(np.int8)
    d = scores.shape[1]
    out = np.zeros(scores.shape, dtype=np.int8)
    for r in range(scores.shape[0]):
        out[r] = threshold_stas(scores[r], eval_percentile(int(truth[r].sum()), d))
    return out


def sweep_windows(step_scores, truth, segments, pcts=SWEEP_PCTS, w2: int = 5, threshold: float | None = 0.5) -> list[dict]:
    """Window-based localization quality for look-back windows sized as a
    percentage of each segment's length.

    Metrics are counted over the cells of every ground-truth anomalous step.
    """
    scores = np.asarray(step_scores, dtype=float)
    truth = np.asarray(truth).astype(np.int8)
    table = []
    for pct in pcts:
        rows, labels = [], []
        for s, e in segments:
            w1 = int(round(pct / 100.0 * (e - s + 1)))
            for t in range(s, e + 1):
                rows.append(window_localize(scores, t, w1, w2))
                labels.append(truth[t])
        was, lab = np.array(rows), np.array(labels)
        pred = decide_rows(was, lab, threshold)
        p, r, f1 = point_metrics(pred, lab)
        a = auc(was, lab) if 0 < lab.sum() < lab.size else None
        table.append({"window_pct": pct, "P": p, "R": r, "F1": f1, "AUC": a})
    return table


def write_sweep_csv(path, table) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["window_pct", "P", "R", "F1", "AUC"])
        w.writeheader()
        w.writerows(table)
