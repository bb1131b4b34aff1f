"""Confusion-matrix based segmentation metrics: per-class IoU, mean IoU, global accuracy."""
from __future__ import annotations

import csv
from typing import Optional, Sequence

import numpy as np

CAMVID_CLASSES = (
    "sky", "building", "column_pole", "road", "sidewalk", "tree",
    "sign", "fence", "car", "pedestrian", "cyclist",
)
VOID = 11


class ConfusionMatrix:
    """K x K integer counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, void_index: Optional[int] = VOID):
        if num_classes < 1:
            raise ValueError("num_classes must be positive")
        self.num_classes = num_classes
        self.void_index = void_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt) -> "ConfusionMatrix":
        accumulate(self, pred, gt, self.void_index)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different size")
        out = ConfusionMatrix(self.num_classes, self.void_index)
        out.counts = self.counts + other.counts
        return out

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def miou(self) -> tuple[np.ndarray, float]:
        return miou(self)

    def accuracy(self) -> float:
        return global_accuracy(self)


def accumulate(cm: ConfusionMatrix, pred, gt, void_index: Optional[int] = VOID) -> ConfusionMatrix:
    """Add every non-void pixel of (pred, gt) to ``cm`` in place."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != label shape {gt.shape}")
    k = cm.num_classes
    valid = gt != void_index if void_index is not None else np.ones(gt.shape, bool)
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValueError(f"prediction outside [0, {k})")
    if g.size and (g.min() < 0 or g.max() >= k):
        raise ValueError(f"label outside [0, {k}) that is not void")
    cm.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return cm


def _counts(cm) -> np.ndarray:
    c = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] == 0:
        raise ValueError("confusion matrix must be a non-empty square array")
    return c


def miou(cm) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from both gt and prediction) and their mean."""
    c = _counts(cm)
    if c.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c).astype(np.float64)
    denom = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    return iou, float(np.nanmean(iou))


def global_accuracy(cm) -> float:
    c = _counts(cm)
    total = c.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(c) / total)


def write_report(cm: ConfusionMatrix, path, class_names: Optional[Sequence[str]] = None) -> None:
    """CSV of (class, IoU) rows followed by mean IoU and global accuracy rows."""
    iou, mean = miou(cm)
    names = list(class_names) if class_names is not None else (
        list(CAMVID_CLASSES) if cm.num_classes == len(CAMVID_CLASSES) else [f"class{i}" for i in range(cm.num_classes)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "iou"])
        for name, v in zip(names, iou):
            w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])
        w.writerow(["mean_iou", f"{mean:.6f}"])
        w.writerow(["global_accuracy", f"{global_accuracy(cm):.6f}"])
