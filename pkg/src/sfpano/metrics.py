"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .functional import IGNORE_INDEX


class ConfusionMatrix:
    """``counts[g, p]`` = number of pixels with ground truth ``g`` predicted as ``p``."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        self.counts += other.counts
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray) -> ConfusionMatrix:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    valid = gt != IGNORE_INDEX
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    c = cm.num_classes
    if g.size and (g.max() >= c or g.min() < 0):
        raise ValueError("ground truth label outside [0, C)")
    if p.size and (p.max() >= c or p.min() < 0):
        raise ValueError("prediction outside [0, C)")
    cm.counts += np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return cm


@dataclass(frozen=True)
class IoUReport:
    per_class: np.ndarray          # NaN where the class has zero union
    miou: float
    minority_miou: float
    majority_miou: float

    def as_rows(self, class_names: Sequence[str]) -> list[tuple[str, float]]:
        return [(name, float(v)) for name, v in zip(class_names, self.per_class)]


def _nanmean(values: np.ndarray) -> float:
    values = values[~np.isnan(values)]
    return float(values.mean()) if values.size else float("nan")


def iou_report(cm: ConfusionMatrix, minority: Iterable[int] = ()) -> IoUReport:
    """Per-class IoU and group means; zero-union classes are left out of every mean."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    minority = sorted(set(int(c) for c in minority))
    majority = [c for c in range(cm.num_classes) if c not in minority]
    return IoUReport(
        per_class=iou,
        miou=_nanmean(iou),
        minority_miou=_nanmean(iou[minority]) if minority else float("nan"),
        majority_miou=_nanmean(iou[majority]) if majority else float("nan"),
    )


def evaluate(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], num_classes: int,
             minority: Iterable[int] = ()) -> IoUReport:
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        accumulate(cm, p, g)
    return iou_report(cm, minority)


def write_report_csv(report: IoUReport, class_names: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou"])
        for name, value in report.as_rows(class_names):
            w.writerow([name, "" if np.isnan(value) else f"{value:.6f}"])
        w.writerow(["mIoU", f"{report.miou:.6f}"])
        w.writerow(["minority_mIoU", f"{report.minority_miou:.6f}"])
        w.writerow(["majority_mIoU", f"{report.majority_miou:.6f}"])


def colorize_labels(label: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """uint8 RGB rendering of a label map; ignored pixels are black."""
    out = np.zeros(label.shape + (3,), dtype=np.uint8)
    valid = label != IGNORE_INDEX
    out[valid] = np.round(np.clip(palette[label[valid]], 0, 1) * 255).astype(np.uint8)
    return out
