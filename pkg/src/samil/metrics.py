"""Evaluation metrics: balanced accuracy, AUROC, confusion matrix, attention audit."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from samil.errors import DomainError, ShapeError

CLASSES = (0, 1, 2)

# (name, positive classes, negative classes) for the three screening tasks
SCREENING_TASKS = (
    ("no_vs_some", (1, 2), (0,)),
    ("significant_vs_not", (2,), (0, 1)),
    ("early_vs_significant", (2,), (1,)),
)


def _labels(y, name):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"{name} must be 1-D")
    if y.size and not np.all(np.isin(y, CLASSES)):
        raise DomainError(f"{name} contains labels outside {CLASSES}")
    return y.astype(np.intp)


def confusion_matrix(y_true, y_pred) -> np.ndarray:
    """3x3 counts; entry (i, j) counts true class i predicted as j."""
    t, p = _labels(y_true, "y_true"), _labels(y_pred, "y_pred")
    if t.shape != p.shape:
        raise ShapeError(f"length mismatch: {t.shape} vs {p.shape}")
    cm = np.zeros((3, 3), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the three classes; every class must occur in y_true."""
    cm = confusion_matrix(y_true, y_pred)
    counts = cm.sum(axis=1)
    if np.any(counts == 0):
        raise DomainError(f"class(es) {np.flatnonzero(counts == 0).tolist()} absent from y_true")
    # exact rational mean, rounded once, so the result does not depend on summation order
    return float(sum(Fraction(int(h), int(n)) for h, n in zip(np.diag(cm), counts)) / len(CLASSES))


def auroc(scores, y_binary) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ = s-), computed from average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_binary)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("scores and labels must be 1-D of equal length")
    if not np.all(np.isin(y, (0, 1))):
        raise DomainError("binary labels must be 0 or 1")
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # average 1-based ranks within runs of ties
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def screening_aurocs(probs, y_true) -> dict:
    """AUROC of the three screening dichotomies; NaN where a task lacks a class."""
    probs = np.asarray(probs)
    y = _labels(y_true, "y_true")
    out = {}
    for name, pos, neg in SCREENING_TASKS:
        keep = np.isin(y, pos + neg)
        score = probs[keep][:, list(pos)].sum(axis=1)
        yb = np.isin(y[keep], pos).astype(int)
        try:
            out[name] = auroc(score, yb)
        except DomainError:
            out[name] = float("nan")
    return out


def attention_relevance_curve(attentions, relevances, max_rank: int) -> np.ndarray:
    """Mean oracle relevance of the instance at each attention rank 1..max_rank.

    Instances are sorted by attention, descending, with ties broken by lower
    instance index. Studies with fewer than r instances do not contribute to
    rank r; ranks no study reaches are NaN.
    """
    attentions, relevances = list(attentions), list(relevances)
    if not attentions:
        raise DomainError("attention audit needs at least one study")
    if len(attentions) != len(relevances):
        raise ShapeError("one relevance vector per attention vector is required")
    total = np.zeros(max_rank)
    count = np.zeros(max_rank)
    for att, rel in zip(attentions, relevances):
        att, rel = np.asarray(att), np.asarray(rel)
        if att.shape != rel.shape:
            raise ShapeError("attention and relevance lengths differ within a study")
        order = np.argsort(-att, kind="stable")[:max_rank]
        total[: order.size] += rel[order]
        count[: order.size] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)
