"""Segmentation quality metrics built on explicit pixel confusion counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel-level true/false positive/negative counts for one comparison."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Binarize pred at the threshold and count agreement with a binary gt."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("ground truth must be binary (exact 0/1 values)")
    pb = pred >= threshold
    gb = gt >= 0.5
    tp = int(np.count_nonzero(pb & gb))
    tn = int(np.count_nonzero(~pb & ~gb))
    fp = int(np.count_nonzero(pb & ~gb))
    fn = int(np.count_nonzero(~pb & gb))
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def dice(c: ConfusionCounts) -> float:
    """2*tp / (2*tp + fp + fn); 1.0 when both masks are empty."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2.0 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    """tp / (tp + fp + fn); 1.0 when both masks are empty."""
    denom = c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return c.tp / denom


def accuracy(c: ConfusionCounts) -> float:
    """(tp + tn) / total; 1.0 on zero pixels."""
    if c.total == 0:
        return 1.0
    return (c.tp + c.tn) / c.total


def all_scores(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> dict[str, float]:
    c = confusion(pred, gt, threshold)
    return {"dice": dice(c), "iou": iou(c), "acc": accuracy(c)}
