"""Training losses: mean-squared reconstruction plus boundary-weighted BCE/IoU.

The weighted losses emphasize pixels near label boundaries: a stride-1 mean
pool over the target produces a local-average map, and pixels disagreeing
with their neighborhood (exactly the boundary band) receive weights above 1.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError

PROB_EPS = 1e-7
IOU_SMOOTHING = 1.0
DEFAULT_WEIGHT_KERNEL = 31
DEFAULT_WEIGHT_AMPLIFICATION = 5.0


class CompositeLoss(NamedTuple):
    total: torch.Tensor
    weighted_iou: torch.Tensor
    weighted_bce: torch.Tensor


def _as_batched(t: torch.Tensor) -> torch.Tensor:
    if t.ndim == 3:
        return t.unsqueeze(0)
    if t.ndim == 4:
        return t
    raise ShapeMismatchError(f"expected (C,H,W) or (B,C,H,W) tensor, got {tuple(t.shape)}")


def euclidean_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def boundary_weights(target: torch.Tensor,
                     kernel: int = DEFAULT_WEIGHT_KERNEL,
                     amplification: float = DEFAULT_WEIGHT_AMPLIFICATION) -> torch.Tensor:
    """Per-pixel weights >= 1, larger where the target varies locally.

    w = 1 + amplification * |mean_pool(target, kernel) - target| with
    stride-1 same-padding pooling. Padding is excluded from the pool mean so
    constant targets get weights identically 1 up to the border.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be a positive odd integer, got {kernel}")
    t = _as_batched(target)
    pooled = F.avg_pool2d(t, kernel_size=kernel, stride=1, padding=kernel // 2,
                          count_include_pad=False)
    w = 1.0 + amplification * torch.abs(pooled - t)
    return w if target.ndim == 4 else w.squeeze(0)


def _check_triplet(pred: torch.Tensor, target: torch.Tensor, weights: torch.Tensor) -> None:
    if pred.shape != target.shape or pred.shape != weights.shape:
        raise ShapeMismatchError(
            f"pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
            f"weights {tuple(weights.shape)} must all match"
        )


def weighted_bce(pred: torch.Tensor, target: torch.Tensor,
                 weights: torch.Tensor) -> torch.Tensor:
    """Weight-normalized binary cross-entropy against (possibly soft) targets.

    Predictions are clamped away from {0, 1} so the loss stays finite.
    """
    _check_triplet(pred, target, weights)
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    per_pixel = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p))
    return (weights * per_pixel).sum() / weights.sum()


def weighted_iou_loss(pred: torch.Tensor, target: torch.Tensor,
                      weights: torch.Tensor) -> torch.Tensor:
    """One minus the weighted soft intersection-over-union, smoothed by 1."""
    _check_triplet(pred, target, weights)
    inter = (weights * pred * target).sum()
    union = (weights * (pred + target - pred * target)).sum()
    return 1.0 - (inter + IOU_SMOOTHING) / (union + IOU_SMOOTHING)


def composite_loss(pred: torch.Tensor, target: torch.Tensor,
                   weights: torch.Tensor) -> CompositeLoss:
    """Sum of the weighted IoU and weighted BCE terms, parts kept for logging."""
    wiou = weighted_iou_loss(pred, target, weights)
    wbce = weighted_bce(pred, target, weights)
    return CompositeLoss(total=wiou + wbce, weighted_iou=wiou, weighted_bce=wbce)
