"""Confusion matrices and the OA / AA / kappa scores.

Rows hold the ground-truth class, columns the prediction. Classes are
1-based in the public API (0 is reserved for unlabeled pixels) and stored at
index ``class - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataflow import BUCKETS, bucket_overlap


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @classmethod
    def empty(cls, k: int) -> ConfusionMatrix:
        if k < 1:
            raise ValueError("need at least one class")
        return cls(np.zeros((k, k), dtype=np.int64))

    @classmethod
    def from_pairs(cls, truth, prediction, k: int) -> ConfusionMatrix:
        cm = cls.empty(k)
        cm.update(truth, prediction)
        return cm

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def _check(self, values: np.ndarray, what: str) -> None:
        bad = values[(values < 1) | (values > self.k)]
        if bad.size:
            raise ValueError(f"{what} class {int(bad[0])} outside [1, {self.k}]")

    def accumulate(self, truth: int, prediction: int) -> ConfusionMatrix:
        self.update([truth], [prediction])
        return self

    def update(self, truth, prediction) -> ConfusionMatrix:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        prediction = np.asarray(prediction, dtype=np.int64).reshape(-1)
        if truth.shape != prediction.shape:
            raise ValueError(f"{truth.size} truths but {prediction.size} predictions")
        self._check(truth, "truth")
        self._check(prediction, "prediction")
        np.add.at(self.counts, (truth - 1, prediction - 1), 1)
        return self

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.k != self.k:
            raise ValueError(f"cannot merge {self.k}-class and {other.k}-class matrices")
        return ConfusionMatrix(self.counts + other.counts)


def _counts(cm) -> np.ndarray:
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {counts.shape}")
    if (counts < 0).any():
        raise ValueError("confusion matrix has negative entries")
    if counts.sum() <= 0:
        raise ValueError("confusion matrix is empty")
    return counts


def oa(cm) -> float:
    """Correct samples over all samples."""
    c = _counts(cm)
    return float(np.trace(c) / c.sum())


def per_class_recall(cm) -> np.ndarray:
    c = _counts(cm)
    rows = c.sum(axis=1)
    empty = np.flatnonzero(rows == 0)
    if empty.size:
        raise ValueError(f"class {int(empty[0]) + 1} has no ground-truth samples; AA is undefined")
    return np.diag(c) / rows


def aa(cm) -> float:
    """Mean over classes of the per-class recall."""
    return float(per_class_recall(cm).mean())


def kappa(cm) -> float:
    c = _counts(cm).astype(np.float64)
    n = c.sum()
    chance = float(c.sum(axis=1) @ c.sum(axis=0))
    denom = n * n - chance
    if denom == 0:
        raise ValueError("kappa is undefined: expected agreement is total")
    return float((n * np.trace(c) - chance) / denom)


def bucketed_accuracy(truth, prediction, rates) -> dict[str, dict]:
    """OA within each overlap bucket; empty buckets are left out."""
    truth = np.asarray(truth)
    prediction = np.asarray(prediction)
    ids = bucket_overlap(rates)
    out = {}
    for i, name in enumerate(BUCKETS):
        sel = ids == i
        n = int(sel.sum())
        if n:
            out[name] = {"count": n, "oa": float((truth[sel] == prediction[sel]).mean())}
    return out


def report(cm: ConfusionMatrix, buckets: dict | None = None) -> dict:
    """JSON-ready evaluation summary."""
    c = _counts(cm)
    rows = c.sum(axis=1)
    recall = [float(c[i, i] / rows[i]) if rows[i] else None for i in range(len(c))]
    out = {
        "oa": oa(c),
        "aa": aa(c) if all(rows) else None,
        "kappa": kappa(c),
        "per_class_recall": recall,
        "confusion_matrix": c.tolist(),
        "samples": int(c.sum()),
    }
    if buckets is not None:
        out["overlap_buckets"] = buckets
    return out
