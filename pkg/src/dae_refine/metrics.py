"""Confusion-matrix based segmentation metrics: per-class IoU, mean IoU and global accuracy."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, n_classes: int, counts: np.ndarray | None = None):
        self.n_classes = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def accumulate(self, label_true: np.ndarray, label_pred: np.ndarray) -> ConfusionMatrix:
        label_true = np.asarray(label_true)
        label_pred = np.asarray(label_pred)
        if label_true.shape != label_pred.shape:
            raise ValueError(f"label maps differ in shape: {label_true.shape} vs {label_pred.shape}")
        k = self.n_classes
        for arr in (label_true, label_pred):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"class index outside [0, {k})")
        flat = label_true.astype(np.int64).ravel() * k + label_pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.n_classes != self.n_classes:
            raise ValueError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.n_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(label_true, label_pred, n_classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(n_classes).accumulate(label_true, label_pred)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN for a class absent from both truth and prediction."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean IoU over the classes that occur in the ground truth."""
    present = cm.counts.sum(axis=1) > 0
    if not present.any():
        return float("nan")
    return float(np.mean(iou_per_class(cm)[present]))


def global_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    return float(np.trace(cm.counts) / total) if total else float("nan")


def write_report(path: str | Path, rows: Iterable[tuple[str, ConfusionMatrix]], class_names: Sequence[str]) -> None:
    """One CSV row per model: per-class IoU, mean IoU, global accuracy (percent, 2 decimals)."""
    header = ["model", *class_names, "mean_iou", "global_accuracy"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for name, cm in rows:
            ious = iou_per_class(cm)
            writer.writerow(
                [name, *(_pct(v) for v in ious), _pct(mean_iou(cm)), _pct(global_accuracy(cm))]
            )


def _pct(v: float) -> str:
    return "nan" if np.isnan(v) else f"{100 * v:.2f}"
