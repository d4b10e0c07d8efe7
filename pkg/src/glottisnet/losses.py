"""Training losses: quality-focal classification, GIoU box regression, and
soft-Dice mask loss. All three are differentiable through the tensor tape and
verified against finite differences."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

_PROB_FLOOR = 1e-7


def quality_focal_loss(pred_logits: Tensor, targets: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Focal-modulated cross-entropy against quality targets in [0, 1].

    pred_logits: (P, C); targets: same shape, IoU-quality for the assigned
    class of each positive prior and 0 elsewhere. Per-prior losses sum over
    classes; the result is the mean over priors.
    """
    if pred_logits.shape != np.asarray(targets).shape:
        raise ConfigError(
            f"logits shape {pred_logits.shape} != targets shape {np.shape(targets)}"
        )
    y = Tensor(np.asarray(targets, dtype=pred_logits.data.dtype))
    p = T.clamp(T.sigmoid(pred_logits), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    pos = y * ((1.0 - p) ** gamma) * T.log(p)
    neg = (1.0 - y) * (p**gamma) * T.log(1.0 - p)
    per_prior = T.tsum(-(pos + neg), axis=1)
    return per_prior.mean()


def _columns(t: Tensor):
    """Split a (P, 4) tensor into four (P, 1) columns via constant selectors."""
    eye = np.eye(4, dtype=t.data.dtype)
    return tuple(T.matmul(t, Tensor(eye[:, j : j + 1])) for j in range(4))


def giou_box_loss(pred_boxes: Tensor, gt_boxes: np.ndarray, eps: float = 1e-9) -> Tensor:
    """Mean 1 - GIoU over box pairs; 0 for identical boxes, approaching 2 for
    distant disjoint ones. Ground-truth boxes must be non-degenerate."""
    gt = np.asarray(gt_boxes, dtype=pred_boxes.data.dtype).reshape(-1, 4)
    if pred_boxes.shape != gt.shape:
        raise ConfigError(f"box shapes differ: {pred_boxes.shape} vs {gt.shape}")
    if np.any(gt[:, 2] <= gt[:, 0]) or np.any(gt[:, 3] <= gt[:, 1]):
        raise ConfigError("degenerate ground-truth box in GIoU loss")
    px1, py1, px2, py2 = _columns(pred_boxes)
    gx1, gy1, gx2, gy2 = (Tensor(gt[:, j : j + 1]) for j in range(4))

    iw = T.maximum(T.minimum(px2, gx2) - T.maximum(px1, gx1), 0.0)
    ih = T.maximum(T.minimum(py2, gy2) - T.maximum(py1, gy1), 0.0)
    inter = iw * ih
    area_p = T.maximum(px2 - px1, 0.0) * T.maximum(py2 - py1, 0.0)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / (union + eps)
    ew = T.maximum(px2, gx2) - T.minimum(px1, gx1)
    eh = T.maximum(py2, gy2) - T.minimum(py1, gy1)
    enclose = ew * eh
    giou = iou - (enclose - union) / (enclose + eps)
    return (1.0 - giou).mean()


def dice_mask_loss(
    pred_probs: Tensor,
    targets: np.ndarray,
    crop: np.ndarray | None = None,
    smooth: float = 1.0,
) -> Tensor:
    """Mean soft-Dice loss over instances: 1 - (2 sum(pg) + s) / (sum p + sum g + s).

    pred_probs / targets: (P, M) flattened masks with values in [0, 1]. An
    optional boolean crop of the same shape restricts every sum to the
    instance's box region.
    """
    tgt = np.asarray(targets, dtype=pred_probs.data.dtype)
    if pred_probs.shape != tgt.shape:
        raise ConfigError(f"mask shapes differ: {pred_probs.shape} vs {tgt.shape}")
    if pred_probs.data.ndim != 2:
        raise ConfigError("dice loss expects (instances, pixels) tensors")
    p = pred_probs
    if crop is not None:
        p = p * Tensor(np.asarray(crop, dtype=pred_probs.data.dtype))
        tgt = tgt * np.asarray(crop, dtype=tgt.dtype)
    g = Tensor(tgt)
    inter = T.tsum(p * g, axis=1)
    denom = T.tsum(p, axis=1) + Tensor(tgt.sum(axis=1))
    dice = (2.0 * inter + smooth) / (denom + smooth)
    return (1.0 - dice).mean()
