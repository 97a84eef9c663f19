"""Quadratic weighted kappa, confusion matrices, and dataset evaluation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MetricError(ValueError):
    """Inputs to a metric are malformed."""


def _check_labels(values: Sequence[int], num_classes: int, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise MetricError(f"{what} must be 1-d, got shape {arr.shape}")
    if arr.size == 0:
        raise MetricError(f"{what} is empty")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise MetricError(f"{what} must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= num_classes:
        raise MetricError(f"{what} must lie in 0..{num_classes - 1}")
    return arr


def quadratic_weighted_kappa(
    y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = 6
) -> float:
    """Agreement on an ordinal scale, penalizing errors by squared distance.

    kappa = 1 - sum(W * O) / sum(W * E) with W[i, j] = (i - j)^2 / (C - 1)^2,
    O the observed confusion counts and E the outer product of the two
    marginals scaled to the sample count. When both marginals sit on the
    same single class the denominator vanishes; that degenerate perfect
    agreement is defined as 1.0 (with a warning).
    """
    if num_classes < 2:
        raise MetricError("num_classes must be >= 2")
    t = _check_labels(y_true, num_classes, "y_true")
    p = _check_labels(y_pred, num_classes, "y_pred")
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.shape[0]} true vs {p.shape[0]} predicted")
    n = t.shape[0]
    c = num_classes

    observed = np.zeros((c, c), dtype=np.float64)
    np.add.at(observed, (t, p), 1.0)
    marg_true = observed.sum(axis=1)
    marg_pred = observed.sum(axis=0)
    expected = np.outer(marg_true, marg_pred) / n

    idx = np.arange(c, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (c - 1) ** 2

    denom = float((weights * expected).sum())
    if denom == 0.0:
        warnings.warn(
            "both label marginals are concentrated on one identical class; "
            "kappa is defined as 1.0 here",
            RuntimeWarning,
            stacklevel=2,
        )
        return 1.0
    return 1.0 - float((weights * observed).sum()) / denom


@dataclass
class ConfusionMatrix:
    """Integer count matrix, rows = true class, columns = predicted class."""

    counts: np.ndarray  # (C, C) int64

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise MetricError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricError("confusion counts must be non-negative")

    @classmethod
    def from_pairs(
        cls, y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = 6
    ) -> "ConfusionMatrix":
        t = _check_labels(y_true, num_classes, "y_true")
        p = _check_labels(y_pred, num_classes, "y_pred")
        if t.shape != p.shape:
            raise MetricError("y_true and y_pred lengths differ")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts=counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def to_lists(self) -> list[list[int]]:
        return [[int(v) for v in row] for row in self.counts]


@dataclass
class EvalResult:
    """Per-dataset evaluation: kappa, confusion, and per-slide predictions."""

    kappa: float
    confusion: ConfusionMatrix
    predictions: list[dict] = field(default_factory=list)


def evaluate(model, dataset: Sequence) -> EvalResult:
    """Score `model` (anything with .predict(sample) -> (logit, grade)) on slides.

    The returned kappa is always consistent with the returned confusion
    matrix: both derive from the same prediction pass.
    """
    if not dataset:
        raise MetricError("cannot evaluate on an empty dataset")
    num_classes = getattr(getattr(model, "config", None), "num_classes", 6)
    y_true, y_pred, predictions = [], [], []
    for sample in dataset:
        logit, grade = model.predict(sample)
        y_true.append(int(sample.label))
        y_pred.append(int(grade))
        predictions.append(
            {
                "slide_id": sample.slide_id,
                "label": int(sample.label),
                "grade": int(grade),
                "logit": float(logit),
            }
        )
    kappa = quadratic_weighted_kappa(y_true, y_pred, num_classes)
    confusion = ConfusionMatrix.from_pairs(y_true, y_pred, num_classes)
    return EvalResult(kappa=kappa, confusion=confusion, predictions=predictions)
