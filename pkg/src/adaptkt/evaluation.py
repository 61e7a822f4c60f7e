"""Metrics and the fold-wise experiment driver.

AUC is the Mann-Whitney rank statistic with tied scores counted half,
which equals the trapezoidal area under the ROC curve.  F1 binarizes at
a fixed threshold.  Predictions are pooled across every student and
step of a dataset before either metric is computed, so a student with
more scored steps weighs proportionally more.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ktmodel as kt
from .corpus import DomainDataset, kfold_split
from .errors import DataError

DEFAULT_THRESHOLD = 0.5


def _as_arrays(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.ndim != 1:
        raise DataError(f"metrics: need matching 1-D arrays, got {s.shape} and {y.shape}")
    if s.size == 0:
        raise DataError("metrics: empty input")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise DataError("metrics: labels must be 0 or 1")
    return s, y


def _tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks; equal values share the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Probability a positive outranks a negative, ties counting half."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError(
            f"auc undefined: {n_pos} positive and {n_neg} negative labels"
        )
    ranks = _tied_ranks(s)
    u = float(ranks[y == 1.0].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def f1(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Harmonic mean of precision and recall at the threshold; 0 if empty."""
    s, y = _as_arrays(scores, labels)
    predicted = s >= threshold
    tp = float(np.sum(predicted & (y == 1.0)))
    fp = float(np.sum(predicted & (y == 0.0)))
    fn = float(np.sum(~predicted & (y == 1.0)))
    denom = 2.0 * tp + fp + fn
    if denom == 0.0:
        return 0.0
    return 2.0 * tp / denom


def fingerprint(fields: dict) -> str:
    """Canonical one-line identity string for a run's inputs."""
    return json.dumps(fields, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class FoldMetrics:
    fold: int
    auc: float
    f1: float
    pairs: int


@dataclass(frozen=True)
class MetricsReport:
    """Pooled metrics, with the per-fold breakdown when folds were run."""

    auc: float
    f1: float
    threshold: float
    pairs: int
    per_fold: tuple[FoldMetrics, ...] = ()
    fingerprint: str = ""

    def __post_init__(self):
        for name in ("auc", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name} out of range: {v}")

    @property
    def auc_std(self) -> float:
        if not self.per_fold:
            return 0.0
        return float(np.std([f.auc for f in self.per_fold]))

    @property
    def f1_std(self) -> float:
        if not self.per_fold:
            return 0.0
        return float(np.std([f.f1 for f in self.per_fold]))


def pooled_predictions(
    model: kt.Model,
    dataset: DomainDataset,
    out_index: dict[str, int] | None = None,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Every (predicted probability, label) pair of the dataset, pooled."""
    batches = kt.dataset_batches(model, dataset, batch_size, out_index=out_index)
    q_matrix = model.question_matrix(dataset.bank)
    preds, labels = [], []
    for batch in batches:
        p, y = kt.scored_pairs(model.kt, q_matrix, batch)
        preds.append(p)
        labels.append(y)
    return np.concatenate(preds), np.concatenate(labels)


def evaluate(
    model: kt.Model,
    dataset: DomainDataset,
    threshold: float = DEFAULT_THRESHOLD,
    run_fingerprint: str = "",
    out_index: dict[str, int] | None = None,
) -> MetricsReport:
    """Score a dataset with micro-pooling across students and steps.

    out_index overrides the output-column lookup, which is how the
    direct-transfer remap evaluates a source output layer on a target
    bank.  Inference only; parameters are left untouched.
    """
    preds, labels = pooled_predictions(model, dataset, out_index=out_index)
    return MetricsReport(
        auc=auc(preds, labels),
        f1=f1(preds, labels, threshold),
        threshold=threshold,
        pairs=int(preds.size),
        fingerprint=run_fingerprint,
    )


TrainFold = Callable[[int, DomainDataset], "tuple[kt.Model, dict[str, int] | None]"]


def cross_validate(
    dataset: DomainDataset,
    k: int,
    train_fold: TrainFold,
    seed: int = 0,
    threshold: float = DEFAULT_THRESHOLD,
    run_fingerprint: str = "",
) -> MetricsReport:
    """Student-level k-fold driver.

    train_fold(fold_index, train_split) returns the model to score on
    the held-out split, plus an optional output-column remap.  Reported
    auc and f1 are the arithmetic means of the per-fold values; the
    pair count is the total.
    """
    per_fold = []
    for i, (train_split, test_split) in enumerate(kfold_split(dataset, k, seed)):
        model, out_index = train_fold(i, train_split)
        rep = evaluate(model, test_split, threshold, out_index=out_index)
        per_fold.append(FoldMetrics(fold=i, auc=rep.auc, f1=rep.f1, pairs=rep.pairs))
    return MetricsReport(
        auc=float(np.mean([f.auc for f in per_fold])),
        f1=float(np.mean([f.f1 for f in per_fold])),
        threshold=threshold,
        pairs=int(sum(f.pairs for f in per_fold)),
        per_fold=tuple(per_fold),
        fingerprint=run_fingerprint,
    )
