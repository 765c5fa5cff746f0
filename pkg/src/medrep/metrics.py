"""Evaluation metrics with explicit tie handling.

AuROC counts ties as half via average ranks. Average precision uses step
interpolation with tie blocks collapsed into a single step, so constant
scores yield the positive prevalence. Top-k selections break ties toward
lower label indices for determinism.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MetricError(ValueError):
    pass


def _ranks_average(values):
    """Ranks 1..n with ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels):
    """Probability that a random positive outranks a random negative; tied
    pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both classes present")
    ranks = _ranks_average(scores)
    return (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels):
    """Step-interpolated average precision; a block of tied scores is one
    step whose precision is measured at the block end."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = labels.sum()
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ap = 0.0
    seen = 0.0
    tp = 0.0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        block_pos = y[i:j + 1].sum()
        seen += j - i + 1
        tp += block_pos
        if block_pos:
            ap += (block_pos / n_pos) * (tp / seen)
        i = j + 1
    return ap


def auprc_sample_avg(score_matrix, label_matrix):
    """Per-sample average precision, averaged over samples. Samples without
    positives are excluded; returns (value, n_excluded)."""
    scores = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(label_matrix, dtype=np.float64))
    if scores.shape != labels.shape:
        raise MetricError(f"shape mismatch {scores.shape} vs {labels.shape}")
    values = []
    excluded = 0
    for i in range(scores.shape[0]):
        if labels[i].sum() == 0:
            excluded += 1
            continue
        values.append(average_precision(scores[i], labels[i]))
    if not values:
        raise MetricError("no sample with a positive label")
    return float(np.mean(values)), excluded


def _f1_from_counts(tp, fp, fn):
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0  # nothing to find and nothing predicted
    return 2 * tp / denom


def f1_binary(scores, labels, threshold=0.5):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    pred = scores >= threshold
    tp = float(np.sum(pred & (labels == 1)))
    fp = float(np.sum(pred & (labels == 0)))
    fn = float(np.sum(~pred & (labels == 1)))
    return _f1_from_counts(tp, fp, fn)


def f1_sample_macro(score_matrix, label_matrix, threshold=0.5):
    """Per-sample F1 of thresholded predictions, averaged over samples."""
    scores = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(label_matrix, dtype=np.float64))
    return float(np.mean([f1_binary(s, l, threshold) for s, l in zip(scores, labels)]))


def _f1_weighted_from_predictions(pred, labels):
    support = labels.sum(axis=0)
    total = support.sum()
    if total == 0:
        return 0.0
    value = 0.0
    for j in range(labels.shape[1]):
        if support[j] == 0:
            continue
        tp = float(np.sum(pred[:, j] & (labels[:, j] == 1)))
        fp = float(np.sum(pred[:, j] & (labels[:, j] == 0)))
        fn = float(np.sum(~pred[:, j] & (labels[:, j] == 1)))
        value += support[j] * _f1_from_counts(tp, fp, fn)
    return float(value / total)


def f1_weighted(score_matrix, label_matrix, threshold=0.5):
    """Per-label F1 weighted by label support."""
    scores = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(label_matrix, dtype=np.float64))
    return _f1_weighted_from_predictions(scores >= threshold, labels)


def top_k_indices(scores, k):
    """Indices of the k largest scores, ties broken by lower index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return order[:k]


def f1_weighted_inflated(score_matrix, label_matrix):
    """Thresholdless variant: each sample's top-|ground truth| scores become
    the positive predictions (leaking the positive count), then label-weighted
    F1 is computed."""
    scores = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(label_matrix, dtype=np.float64))
    pred = np.zeros_like(labels, dtype=bool)
    for i in range(scores.shape[0]):
        g = int(labels[i].sum())
        if g:
            pred[i, top_k_indices(scores[i], g)] = True
    return _f1_weighted_from_predictions(pred, labels)


F1_VARIANTS = ("binary", "samples", "weighted", "weighted_inflated")


def f1_scores(scores, labels, threshold=0.5, variant="binary"):
    if variant == "binary":
        return f1_binary(scores, labels, threshold)
    if variant == "samples":
        return f1_sample_macro(scores, labels, threshold)
    if variant == "weighted":
        return f1_weighted(scores, labels, threshold)
    if variant == "weighted_inflated":
        return f1_weighted_inflated(scores, labels)
    raise MetricError(f"unknown F1 variant '{variant}' (choose from {F1_VARIANTS})")


def recall_at_k(score_matrix, label_matrix, k):
    """Mean per-sample |top-k intersection ground truth| / |ground truth|.
    Samples with empty ground truth are excluded; returns (value, n_excluded)."""
    if k < 1:
        raise MetricError("k must be >= 1")
    scores = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(label_matrix, dtype=np.float64))
    values = []
    excluded = 0
    for i in range(scores.shape[0]):
        gt = np.flatnonzero(labels[i])
        if gt.size == 0:
            excluded += 1
            continue
        top = set(top_k_indices(scores[i], k).tolist())
        values.append(len(top & set(gt.tolist())) / gt.size)
    if not values:
        raise MetricError("no sample with ground-truth labels")
    return float(np.mean(values)), excluded


def weighted_auroc(score_matrix, class_ids):
    """One-vs-rest AuROC per present class, weighted by class support."""
    scores = np.atleast_2d(np.asarray(score_matrix, dtype=np.float64))
    ids = np.asarray(class_ids, dtype=np.int64)
    present = np.unique(ids)
    if present.size < 2:
        raise MetricError("weighted auroc needs at least two classes present")
    total = 0.0
    weight = 0.0
    for c in present:
        support = float((ids == c).sum())
        total += support * auroc(scores[:, c], (ids == c).astype(int))
        weight += support
    return total / weight


def shannon_entropy(p):
    """Natural-log entropy of a distribution (0 log 0 = 0)."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------------------
# report container


@dataclass
class MetricReport:
    task: str
    metrics: dict
    n_samples: int
    threshold: float = None
    excluded: dict = field(default_factory=dict)
    subgroups: dict = field(default_factory=dict)

    def to_json(self):
        payload = {
            "task": self.task,
            "metrics": self.metrics,
            "n_samples": self.n_samples,
            "threshold": self.threshold,
            "excluded": self.excluded,
            "subgroups": self.subgroups,
        }
        return json.dumps(payload, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text)
        return cls(task=obj["task"], metrics=obj["metrics"], n_samples=obj["n_samples"],
                   threshold=obj.get("threshold"), excluded=obj.get("excluded", {}),
                   subgroups=obj.get("subgroups", {}))
