"""Threshold-sweep detection metrics.

All curves treat a sample as predicted positive when ``score >= threshold``
and sweep every distinct score value, so tied scores always move together.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import SingleClassError
from .scene_data import ABNORMAL, IGNORED, NORMAL


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise SingleClassError("need at least one positive and one negative sample")
    return scores, labels


def _sweep(scores, labels):
    """Cumulative (tp, fp) counts at each distinct threshold, highest first."""
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # keep the last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return tp[last], fp[last], s[last]


def roc_curve(scores, labels):
    """Return ``(fpr, tpr, thresholds)`` starting at the origin."""
    scores, labels = _check(scores, labels)
    tp, fp, thr = _sweep(scores, labels)
    P, N = labels.sum(), (~labels).sum()
    return np.r_[0.0, fp / N], np.r_[0.0, tp / P], np.r_[np.inf, thr]


def roc_auc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def pr_auc(scores, labels, positive_class: bool = True) -> float:
    """Step-wise area under precision-recall (no interpolation between points).

    With ``positive_class=False`` the negatives become the positive class and
    lower scores count as more positive.
    """
    scores, labels = _check(scores, labels)
    if not positive_class:
        scores, labels = -scores, ~labels
    tp, fp, _ = _sweep(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / labels.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr_at_tpr(scores, labels, tpr: float = 0.95) -> float:
    """Smallest false-positive rate among thresholds whose TPR reaches ``tpr``."""
    fpr_, tpr_, _ = roc_curve(scores, labels)
    return float(np.min(fpr_[tpr_ >= tpr - 1e-12]))


def _binary(labels) -> tuple[np.ndarray, np.ndarray]:
    """Map string labels to (keep, abnormal) masks, dropping ``ignored``."""
    labels = np.asarray(labels)
    keep = labels != IGNORED
    return keep, labels == ABNORMAL


def detection_report(scores, labels) -> dict:
    """The four headline metrics over string-labelled timesteps."""
    keep, y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64)[keep]
    y = y[keep]
    return {
        "auroc": roc_auc(s, y),
        "aupr_abnormal": pr_auc(s, y, positive_class=True),
        "aupr_normal": pr_auc(s, y, positive_class=False),
        "fpr_at_95_tpr": fpr_at_tpr(s, y, 0.95),
    }


def per_type_auroc(scores: Sequence, labels: Sequence, types: Sequence) -> dict:
    """AUROC of each anomaly type's abnormal timesteps against every normal timestep.

    ``types`` gives the owning scene's anomaly type per timestep (``None`` for
    normal scenes). Types without abnormal timesteps are omitted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    types = np.asarray([t if t is not None else "" for t in types])
    normal = labels == NORMAL
    if not normal.any():
        return {}
    out = {}
    for kind in sorted(set(types[labels == ABNORMAL].tolist())):
        pos = (labels == ABNORMAL) & (types == kind)
        if not pos.any():
            continue
        sel = normal | pos
        out[kind] = roc_auc(scores[sel], pos[sel])
    return out
