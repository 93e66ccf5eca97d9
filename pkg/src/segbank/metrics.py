"""Segmentation metrics: confusion-matrix accumulation and mean IoU."""

from __future__ import annotations

import numpy as np

from .data import DEFAULT_IGNORE_INDEX


class ConfusionMatrix:
    """CxC integer matrix, rows = ground truth, cols = prediction.

    Additive across images: accumulating two prediction sets equals
    accumulating their concatenation.
    """

    def __init__(self, class_count: int):
        self.class_count = class_count
        self.matrix = np.zeros((class_count, class_count), dtype=np.int64)

    def update(self, prediction: np.ndarray, target: np.ndarray,
               ignore_index: int = DEFAULT_IGNORE_INDEX) -> None:
        pred = np.asarray(prediction).ravel()
        gt = np.asarray(target).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {prediction.shape} does not match "
                             f"target shape {target.shape}")
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
        c = self.class_count
        if pred.size:
            if pred.min() < 0 or pred.max() >= c:
                raise ValueError("prediction contains values outside [0, class_count)")
        idx = gt * c + pred
        self.matrix += np.bincount(idx, minlength=c * c).reshape(c, c)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.class_count)
        out.matrix = self.matrix + other.matrix
        return out


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class appears in neither gt nor prediction."""
    m = cm.matrix.astype(np.float64)
    tp = np.diag(m)
    denom = m.sum(axis=1) + m.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    return iou


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean over classes with a nonzero IoU denominator."""
    iou = per_class_iou(cm)
    valid = ~np.isnan(iou)
    if not valid.any():
        raise ValueError("mean_iou: no class has a nonzero denominator")
    return float(iou[valid].mean())
