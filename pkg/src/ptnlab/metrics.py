"""Accuracy, rank-statistic AUC, and the ordinal density AUC (dAUC)."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

GRADES = "abcd"
SPLIT_NAMES = ("a|bcd", "ab|cd", "abc|d")


class UndefinedMetricError(ValueError):
    """AUC needs at least one positive and one negative sample."""


@dataclass
class EvalRecord:
    case_id: int
    grade: int
    probs: np.ndarray

    def __post_init__(self):
        if isinstance(self.grade, str):
            self.grade = GRADES.index(self.grade)
        if not 0 <= self.grade < 4:
            raise ValueError(f"grade index out of range: {self.grade}")
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.shape != (4,) or not np.isclose(self.probs.sum(), 1.0, atol=1e-9) \
                or np.any(self.probs < 0):
            raise ValueError(f"case {self.case_id}: invalid grade distribution {self.probs}")


def make_records(case_ids, grades, probs):
    return [EvalRecord(int(c), int(g), p) for c, g, p in zip(case_ids, grades, probs, strict=True)]


def _unpack(records):
    if not records:
        raise ValueError("metrics need at least one record")
    grades = np.array([r.grade for r in records])
    probs = np.stack([r.probs for r in records])
    return grades, probs


def argmax_grade(probs):
    """Argmax with ties going to the lowest grade (numpy's first-occurrence rule)."""
    return np.argmax(np.asarray(probs), axis=-1)


def accuracy(records):
    grades, probs = _unpack(records)
    return float(np.mean(argmax_grade(probs) == grades))


def auc(positives, negatives):
    """Mann-Whitney AUC with half credit for ties, via average ranks."""
    pos = np.asarray(positives, dtype=float).ravel()
    neg = np.asarray(negatives, dtype=float).ravel()
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC undefined without both positive and negative samples")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def split_aucs(records):
    """AUC for each ordinal split; ``None`` where one side is empty.

    For the split below grade k, a record's score is the probability mass on
    grades >= k and positives are records whose true grade is >= k.
    """
    grades, probs = _unpack(records)
    out = {}
    for k, name in enumerate(SPLIT_NAMES, start=1):
        score = probs[:, k:].sum(axis=1)
        dense = grades >= k
        try:
            out[name] = auc(score[dense], score[~dense])
        except UndefinedMetricError:
            out[name] = None
    return out


def dauc(records, return_skipped=False):
    per_split = split_aucs(records)
    avail = [v for v in per_split.values() if v is not None]
    if not avail:
        raise UndefinedMetricError("every ordinal split is degenerate")
    value = float(np.mean(avail))
    if return_skipped:
        return value, [k for k, v in per_split.items() if v is None]
    return value


def confusion_matrix(records):
    grades, probs = _unpack(records)
    cm = np.zeros((4, 4), dtype=int)
    np.add.at(cm, (grades, argmax_grade(probs)), 1)
    return cm


def summarize(records):
    per_split = split_aucs(records)
    avail = [v for v in per_split.values() if v is not None]
    return {
        "n_records": len(records),
        "accuracy": accuracy(records),
        "split_auc": per_split,
        "skipped_splits": [k for k, v in per_split.items() if v is None],
        "dauc": float(np.mean(avail)) if avail else None,
        "confusion_matrix": confusion_matrix(records).tolist(),
    }


def report(records, path):
    """Write the metric summary as deterministic JSON; returns the summary dict."""
    summary = summarize(records)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def roc_points(positives, negatives):
    """(fpr, tpr) pairs over all distinct thresholds, highest first."""
    pos = np.asarray(positives, dtype=float)
    neg = np.asarray(negatives, dtype=float)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    pts = [(0.0, 0.0)]
    for t in thresholds:
        pts.append((float(np.mean(neg >= t)), float(np.mean(pos >= t))))
    return pts
