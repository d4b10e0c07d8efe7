"""Cost-based dynamic label assignment.

Each (prior, ground-truth) pair gets a weighted cost combining an IoU term,
a focal-style classification term against binary IoU-derived labels, and an
exponential center-distance prior. Positives are the per-GT top-k cheapest
priors; a prior claimed by several GTs goes to the cheapest claim. Two
independent implementations of the selection (heap merge vs. global sort)
must agree exactly; the suite enforces this.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError

# Exponent cap keeps 10**(d - radius) finite for absurdly distant priors
# without disturbing the cost ordering among plausible candidates.
_CENTER_EXP_CAP = 300.0

_PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class PriorPoint:
    """Anchor-free per-cell reference: pixel position of a feature-map cell center."""

    level: int
    x: float
    y: float
    stride: int


@dataclass(frozen=True)
class AssignerConfig:
    iou_weight: float = 3.0
    cls_weight: float = 1.0
    center_weight: float = 3.0
    center_radius: float = 3.0
    gamma: float = 2.0
    eps: float = 1e-8
    topk: int = 3
    soft_label_iou: float = 0.5
    # Optional experiment switch: use IoU-valued targets instead of the
    # binary thresholded labels. Off by default.
    iou_valued_labels: bool = False

    def __post_init__(self):
        if min(self.iou_weight, self.cls_weight, self.center_weight) < 0:
            raise ConfigError("cost weights must be non-negative")
        if self.center_radius <= 0 or self.gamma < 0 or self.eps <= 0 or self.topk < 1:
            raise ConfigError("invalid assigner hyperparameters")

    def scaled(self, factor: float) -> "AssignerConfig":
        return AssignerConfig(
            self.iou_weight * factor,
            self.cls_weight * factor,
            self.center_weight * factor,
            self.center_radius,
            self.gamma,
            self.eps,
            self.topk,
            self.soft_label_iou,
            self.iou_valued_labels,
        )


@dataclass
class CostMatrix:
    """Per (prior, GT) cost components, their weighted total, and auxiliaries.

    candidates marks the (prior, GT) pairs eligible for top-k selection
    (priors whose point lies inside the GT box); None means every pair is
    eligible. A GT without any candidate is served by the argmin fallback.
    """

    c_iou: np.ndarray
    c_cls: np.ndarray
    c_center: np.ndarray
    total: np.ndarray
    iou: np.ndarray
    y_soft: np.ndarray
    candidates: np.ndarray | None = None

    @property
    def num_priors(self) -> int:
        return self.total.shape[0]

    @property
    def num_gts(self) -> int:
        return self.total.shape[1]

    def candidate_mask(self) -> np.ndarray:
        if self.candidates is None:
            return np.ones(self.total.shape, dtype=bool)
        return self.candidates


@dataclass
class AssignmentResult:
    """Per-prior label (-1 negative, else GT index) and per-GT positive lists."""

    prior_gt: np.ndarray
    gt_priors: list[list[int]]

    def __eq__(self, other):
        return (
            isinstance(other, AssignmentResult)
            and np.array_equal(self.prior_gt, other.prior_gt)
            and self.gt_priors == other.gt_priors
        )


# -- cost components -------------------------------------------------------------


def center_prior_cost(prior: PriorPoint, gt_box: Sequence[float], radius: float = 3.0) -> float:
    """Exponential penalty 10**(d - radius) on stride-normalized center distance."""
    x1, y1, x2, y2 = gt_box
    if x2 <= x1 or y2 <= y1:
        raise ConfigError(f"degenerate ground-truth box {gt_box}")
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    d = float(np.hypot(prior.x - cx, prior.y - cy)) / prior.stride
    return float(10.0 ** min(d - radius, _CENTER_EXP_CAP))


def soft_label(iou: float, threshold: float = 0.5) -> float:
    """Binary label: 1 only when IoU strictly exceeds the threshold."""
    return 1.0 if iou > threshold else 0.0


def classification_cost(p, y_soft, gamma: float = 2.0):
    """Focal-modulated cross-entropy cost; p is clamped away from {0, 1}."""
    p = np.clip(np.asarray(p, dtype=np.float64), _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    y = np.asarray(y_soft, dtype=np.float64)
    return -y * (1.0 - p) ** gamma * np.log(p) - (1.0 - y) * p**gamma * np.log(1.0 - p)


def iou_cost(iou, eps: float = 1e-8):
    """-log(IoU + eps): finite everywhere, steeply increasing as overlap vanishes."""
    return -np.log(np.asarray(iou, dtype=np.float64) + eps)


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix between (P, 4) and (G, 4) xyxy boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def assemble_cost_matrix(
    priors: Sequence[PriorPoint],
    pred_boxes: np.ndarray,
    pred_probs: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    cfg: AssignerConfig,
) -> CostMatrix:
    """Build the full (P, G) cost matrix; the IoU is computed exactly once per pair."""
    num_p = len(priors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    num_g = gt_boxes.shape[0]
    if num_g == 0:
        empty = np.zeros((num_p, 0))
        return CostMatrix(empty, empty.copy(), empty.copy(), empty.copy(), empty.copy(), empty.copy())
    if np.any(gt_boxes[:, 2] <= gt_boxes[:, 0]) or np.any(gt_boxes[:, 3] <= gt_boxes[:, 1]):
        raise ConfigError("degenerate ground-truth box (zero area)")
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(num_p, 4)
    pred_probs = np.asarray(pred_probs, dtype=np.float64)

    iou = pairwise_iou(pred_boxes, gt_boxes)
    c_iou = iou_cost(iou, cfg.eps)

    if cfg.iou_valued_labels:
        y = iou
    else:
        y = (iou > cfg.soft_label_iou).astype(np.float64)
    p = pred_probs[:, gt_labels]
    c_cls = classification_cost(p, y, cfg.gamma)

    px = np.array([pr.x for pr in priors], dtype=np.float64)
    py = np.array([pr.y for pr in priors], dtype=np.float64)
    ps = np.array([pr.stride for pr in priors], dtype=np.float64)
    gcx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2.0
    gcy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2.0
    d = np.hypot(px[:, None] - gcx[None, :], py[:, None] - gcy[None, :]) / ps[:, None]
    c_center = 10.0 ** np.minimum(d - cfg.center_radius, _CENTER_EXP_CAP)

    total = cfg.iou_weight * c_iou + cfg.cls_weight * c_cls + cfg.center_weight * c_center
    # candidates: priors whose point falls inside the GT box; a box offset is
    # clamped non-negative, so only these priors can regress the box exactly
    candidates = (
        (px[:, None] >= gt_boxes[None, :, 0])
        & (px[:, None] < gt_boxes[None, :, 2])
        & (py[:, None] >= gt_boxes[None, :, 1])
        & (py[:, None] < gt_boxes[None, :, 3])
    )
    return CostMatrix(c_iou, c_cls, c_center, total, iou, y, candidates)


# -- positive/negative selection -------------------------------------------------


def assign(cost: CostMatrix, cfg: AssignerConfig) -> AssignmentResult:
    """Per-GT top-k selection via a k-way heap merge over sorted candidate lists.

    Eligible (candidate) pairs are consumed in ascending (cost, gt index,
    prior index) order; a pair takes effect when its prior is free and its GT
    is not yet full. A GT left empty (contention, or no candidate at all)
    falls back to its cheapest affordable prior.
    """
    num_p, num_g = cost.total.shape
    prior_gt = np.full(num_p, -1, dtype=np.int64)
    gt_priors: list[list[int]] = [[] for _ in range(num_g)]
    if num_g == 0 or num_p == 0:
        return AssignmentResult(prior_gt, gt_priors)

    totals = cost.total
    cand = cost.candidate_mask()
    order = []
    for g in range(num_g):
        rows = np.flatnonzero(cand[:, g])
        order.append(rows[np.lexsort((rows, totals[rows, g]))])
    heap = [
        (totals[order[g][0], g], g, int(order[g][0]), 0) for g in range(num_g) if order[g].size
    ]
    heapq.heapify(heap)
    counts = np.zeros(num_g, dtype=np.int64)
    while heap:
        c, g, p, pos = heapq.heappop(heap)
        if counts[g] >= cfg.topk:
            continue
        if prior_gt[p] == -1:
            prior_gt[p] = g
            gt_priors[g].append(p)
            counts[g] += 1
        if counts[g] < cfg.topk and pos + 1 < order[g].size:
            nxt = int(order[g][pos + 1])
            heapq.heappush(heap, (totals[nxt, g], g, nxt, pos + 1))

    _rescue_empty_gts(totals, prior_gt, gt_priors)
    for lst in gt_priors:
        lst.sort()
    return AssignmentResult(prior_gt, gt_priors)


def oracle_assign(cost: CostMatrix, cfg: AssignerConfig) -> AssignmentResult:
    """Exhaustive reference: one global sort of all pairs, then sequential sweep."""
    num_p, num_g = cost.total.shape
    prior_gt = np.full(num_p, -1, dtype=np.int64)
    gt_priors: list[list[int]] = [[] for _ in range(num_g)]
    if num_g == 0 or num_p == 0:
        return AssignmentResult(prior_gt, gt_priors)

    flat = cost.total.reshape(-1)
    cand_flat = cost.candidate_mask().reshape(-1)
    p_idx, g_idx = np.divmod(np.arange(flat.size), num_g)
    order = np.lexsort((p_idx, g_idx, flat))
    counts = [0] * num_g
    for k in order:
        if not cand_flat[k]:
            continue
        p, g = int(p_idx[k]), int(g_idx[k])
        if prior_gt[p] == -1 and counts[g] < cfg.topk:
            prior_gt[p] = g
            gt_priors[g].append(p)
            counts[g] += 1

    _rescue_empty_gts(cost.total, prior_gt, gt_priors)
    for lst in gt_priors:
        lst.sort()
    return AssignmentResult(prior_gt, gt_priors)


def _rescue_empty_gts(totals: np.ndarray, prior_gt: np.ndarray, gt_priors: list[list[int]]) -> None:
    """Give a GT that ended up with no positives its cheapest affordable prior.

    Only owners holding at least two positives can be robbed; this keeps the
    'every GT with a candidate gets a positive' invariant whenever the
    pigeonhole allows it. Deterministic: empty GTs ascend, candidates by
    (cost, prior index).
    """
    num_p = totals.shape[0]
    for g, lst in enumerate(gt_priors):
        if lst or num_p == 0:
            continue
        for p in np.lexsort((np.arange(num_p), totals[:, g])):
            p = int(p)
            owner = int(prior_gt[p])
            if owner == -1:
                prior_gt[p] = g
                lst.append(p)
                break
            if len(gt_priors[owner]) >= 2:
                gt_priors[owner].remove(p)
                prior_gt[p] = g
                lst.append(p)
                break


def format_assignment_debug(
    priors: Sequence[PriorPoint],
    cost: CostMatrix,
    result: AssignmentResult,
    cfg: AssignerConfig,
) -> str:
    """Tab-delimited per-prior table consumed by the CLI's assign-debug command."""
    header = "prior\tlevel\td\tiou\tc_iou\tc_cls\tc_center\ttotal\tverdict"
    lines = [header]
    for i, prior in enumerate(priors):
        g = int(result.prior_gt[i])
        if cost.num_gts == 0:
            lines.append(f"{i}\t{prior.level}\t-\t-\t-\t-\t-\t-\tnegative")
            continue
        ref = g if g >= 0 else int(np.argmin(cost.total[i]))
        # invert the center cost back to the stride-normalized distance
        d = np.log10(max(cost.c_center[i, ref], 1e-300)) + cfg.center_radius
        verdict = f"positive({g})" if g >= 0 else "negative"
        lines.append(
            f"{i}\t{prior.level}\t{d:.4f}\t{cost.iou[i, ref]:.4f}"
            f"\t{cost.c_iou[i, ref]:.4f}\t{cost.c_cls[i, ref]:.4f}"
            f"\t{cost.c_center[i, ref]:.6g}\t{cost.total[i, ref]:.6g}\t{verdict}"
        )
    return "\n".join(lines)
