"""Accuracy, average precision and negative-set rejection."""

from __future__ import annotations

import csv
import io
import json

import numpy as np

from .errors import ArgumentError


def accuracy(decisions, refs) -> float:
    if len(decisions) != len(refs):
        raise ArgumentError(f"{len(decisions)} decisions but {len(refs)} references")
    if not decisions:
        raise ArgumentError("accuracy of an empty set is undefined")
    hits = sum(int(d.index == r) for d, r in zip(decisions, refs))
    return hits / len(decisions)


def confusion_counts(decisions, refs, n_labels: int) -> np.ndarray:
    """``(n_labels, n_labels + 1)`` counts, rows = reference, cols = prediction.

    The extra last column collects decisions that carry no label index.
    """
    m = np.zeros((n_labels, n_labels + 1), dtype=np.int64)
    for d, r in zip(decisions, refs):
        m[r, n_labels if d.index is None else d.index] += 1
    return m


def average_precision(scores, relevance) -> float:
    """Non-interpolated AP; ties keep the original order (stable sort)."""
    scores = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevance).astype(bool)
    if scores.shape != rel.shape or scores.ndim != 1:
        raise ArgumentError("scores and relevance must be 1-D and equally long")
    n_pos = int(rel.sum())
    if n_pos == 0:
        raise ArgumentError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = rel[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def per_class_ap(scores, labels) -> list:
    """AP per column, None for columns without positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ArgumentError(f"score matrix {scores.shape} and label matrix "
                            f"{labels.shape} must be equal 2-D shapes")
    if scores.shape[0] < 1:
        raise ArgumentError("need at least one sample")
    return [average_precision(scores[:, c], labels[:, c]) if labels[:, c].any() else None
            for c in range(scores.shape[1])]


def mean_average_precision(scores, labels) -> float:
    """Macro mean of per-class AP over classes with at least one positive."""
    aps = [ap for ap in per_class_ap(scores, labels) if ap is not None]
    if not aps:
        raise ArgumentError("no class has a positive example")
    return float(np.mean(aps))


def rejection_rate(decisions) -> float:
    if not decisions:
        raise ArgumentError("rejection rate of an empty set is undefined")
    return sum(d.branch == "at" for d in decisions) / len(decisions)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def per_class_csv(rows, fields) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in fields})
    return buf.getvalue()
