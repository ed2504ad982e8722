"""Confusion matrix, mIoU and mAcc over per-point labels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LabelOutOfRange, LengthMismatch
from .geometry import IGNORE


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are ground truth, columns predictions.

    ``unpredicted[c]`` counts points of gt class ``c`` predicted as IGNORE;
    they are false negatives for ``c`` and appear in no column. ``ignored``
    counts points whose gt is IGNORE.
    """

    counts: np.ndarray
    unpredicted: np.ndarray
    ignored: int

    @property
    def class_count(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.unpredicted.sum())

    @property
    def gt_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1) + self.unpredicted

    @property
    def present(self) -> np.ndarray:
        return self.gt_counts > 0


def confusion(pred, gt, class_count: int) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predictions for {len(gt)} ground-truth labels")
    for name, lab in (("prediction", pred), ("ground truth", gt)):
        bad = (lab != IGNORE) & ((lab < 0) | (lab >= class_count))
        if bad.any():
            raise LabelOutOfRange(f"{name} label {int(lab[bad][0])} not in [0, {class_count})")
    labeled = gt != IGNORE
    hit = labeled & (pred != IGNORE)
    counts = np.bincount(gt[hit] * class_count + pred[hit],
                         minlength=class_count * class_count).reshape(class_count, class_count)
    unpredicted = np.bincount(gt[labeled & (pred == IGNORE)], minlength=class_count)
    return ConfusionMatrix(counts, unpredicted, int((~labeled).sum()))


def per_class_iou(m: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN for classes with no ground-truth points."""
    tp = np.diag(m.counts).astype(np.float64)
    fp = m.counts.sum(axis=0) - tp
    fn = m.gt_counts - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = tp / (tp + fp + fn)
    return np.where(m.present, iou, np.nan)


def per_class_recall(m: ConfusionMatrix) -> np.ndarray:
    tp = np.diag(m.counts).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        rec = tp / m.gt_counts
    return np.where(m.present, rec, np.nan)


def miou(m: ConfusionMatrix) -> float:
    """Mean IoU over classes that occur in the ground truth (NaN if none)."""
    if not m.present.any():
        return float("nan")
    return float(np.nanmean(per_class_iou(m)))


def macc(m: ConfusionMatrix) -> float:
    if not m.present.any():
        return float("nan")
    return float(np.nanmean(per_class_recall(m)))


def metrics_report(m: ConfusionMatrix, class_names=None) -> dict:
    """JSON-ready summary: per-class IoU/recall, mIoU, mAcc, ignored count."""
    names = list(class_names) if class_names is not None else [str(c) for c in range(m.class_count)]
    iou = per_class_iou(m)
    rec = per_class_recall(m)

    def num(x):
        return None if np.isnan(x) else float(x)

    return {
        "classes": [
            {"id": c, "name": names[c], "iou": num(iou[c]), "recall": num(rec[c]),
             "gt_points": int(m.gt_counts[c])}
            for c in range(m.class_count)
        ],
        "mIoU": num(miou(m)),
        "mAcc": num(macc(m)),
        "ignored": m.ignored,
        "unpredicted": int(m.unpredicted.sum()),
    }
