"""Confusion-matrix accumulation and intersection-over-union scoring.

Matrices are plain integer arrays indexed [reference, predicted]; they can be
accumulated per patch in parallel and merged by addition before scoring.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ConfusionMatrix:
    """(C x C) pixel counts, rows = reference class, columns = predicted."""

    num_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ValueError(
                    f"counts shape {self.counts.shape} does not match "
                    f"num_classes={self.num_classes}"
                )
            if (self.counts < 0).any():
                raise ValueError("confusion counts must be non-negative")

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class IouReport:
    """Per-class IoU plus their mean over the classes that were observed.

    `valid` flags classes with a nonzero IoU denominator; the others are
    excluded from `miou` rather than scored zero. `empty` marks a report
    computed from a matrix with no counted pixels at all.
    """

    per_class: np.ndarray
    valid: np.ndarray
    miou: float
    empty: bool = False


def accumulate(
    cm: ConfusionMatrix,
    pred: np.ndarray,
    ref: np.ndarray,
    ignore_index: int | None = None,
) -> ConfusionMatrix:
    """Add one prediction/reference pair of label maps into the matrix.

    Pixels whose reference equals `ignore_index` are skipped. Returns a new
    matrix; the input is not modified.
    """
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")
    keep = np.ones(ref.shape, dtype=bool)
    if ignore_index is not None:
        keep = ref != ignore_index
    p = pred[keep].astype(np.int64)
    r = ref[keep].astype(np.int64)
    n = cm.num_classes
    if p.size and (p.min() < 0 or p.max() >= n or r.min() < 0 or r.max() >= n):
        raise ValueError(f"labels out of range for a {n}-class matrix")
    binned = np.bincount(r * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, cm.counts + binned)


def iou(cm: ConfusionMatrix, num_scored: int | None = None) -> IouReport:
    """Per-class IoU_c = TP_c / (TP_c + FP_c + FN_c) and their mean.

    Classes absent from both prediction and reference have a zero denominator;
    they are flagged invalid and left out of the mean. When the matrix carries
    trailing bookkeeping classes (a merged "other" bucket), pass `num_scored`
    to restrict the report to the first `num_scored` classes.
    """
    if num_scored is None:
        num_scored = cm.num_classes
    if not 0 < num_scored <= cm.num_classes:
        raise ValueError(f"num_scored must be in [1, {cm.num_classes}]")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = (tp + fp + fn)[:num_scored]
    valid = denom > 0
    per_class = np.zeros(num_scored, dtype=np.float64)
    per_class[valid] = tp[:num_scored][valid] / denom[valid]
    if cm.total == 0:
        return IouReport(per_class, valid, miou=float("nan"), empty=True)
    miou = float(per_class[valid].mean()) if valid.any() else float("nan")
    return IouReport(per_class, valid, miou=miou)


def write_iou_csv(path: str | Path, report: IouReport, class_names: list[str] | None = None):
    """One row per class (name, IoU, counted flag) plus a final miou row."""
    names = class_names or [f"class_{c}" for c in range(len(report.per_class))]
    if len(names) != len(report.per_class):
        raise ValueError("class_names length does not match the report")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou", "counted"])
        for name, value, ok in zip(names, report.per_class, report.valid):
            writer.writerow([name, f"{value:.6f}" if ok else "", int(ok)])
        writer.writerow(["miou", f"{report.miou:.6f}", int(not report.empty)])
