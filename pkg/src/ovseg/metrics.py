"""Confusion matrices and IoU."""

from __future__ import annotations

import csv

import numpy as np

from .errors import InputError

IGNORE_INDEX = 255


def confusion(pred, gt, n: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """counts[g, p]; pixels whose ground truth is ``ignore_index`` are skipped."""
    pred = np.asarray(getattr(pred, "indices", pred))
    gt = np.asarray(getattr(gt, "indices", gt))
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    pred = pred.astype(np.int64).reshape(-1)
    gtv = gt.astype(np.int64).reshape(-1)
    keep = gtv != ignore_index
    g, p = gtv[keep], pred[keep]
    if g.size and (g.max() >= n or p.max() >= n):
        raise InputError(f"class index out of range for {n} classes")
    return np.bincount(g * n + p, minlength=n * n).reshape(n, n)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both prediction and truth."""
    cm = np.asarray(cm, dtype=np.float64)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), np.nan)


def miou(cm: np.ndarray) -> tuple[float, np.ndarray]:
    iou = iou_per_class(cm)
    valid = ~np.isnan(iou)
    return (float(iou[valid].mean()) if valid.any() else float("nan")), iou


def foreground_iou(cm: np.ndarray) -> float:
    """IoU of class 1 for single-class extraction tasks."""
    return float(iou_per_class(cm)[1])


def write_report(path, iou: np.ndarray, mean: float, names=None) -> None:
    names = names or [str(i) for i in range(len(iou))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou"])
        for name, v in zip(names, iou):
            w.writerow([name, "nan" if np.isnan(v) else repr(float(v))])
        w.writerow(["miou", repr(float(mean))])
