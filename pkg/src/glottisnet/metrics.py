"""Evaluation stack: pixel confusion metrics, COCO-style average precision,
and end-to-end latency statistics.

Dice/IoU are corpus-pooled over per-class pixel confusion counts; classes
absent from both prediction and ground truth are excluded from the means
(the report says so explicitly). Average precision follows the standard
101-point interpolation with scale strata at 32^2 and 96^2 pixels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError

COCO_IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
AREA_SMALL_MAX = 32**2
AREA_MEDIUM_MAX = 96**2
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, AREA_SMALL_MAX),
    "medium": (AREA_SMALL_MAX, AREA_MEDIUM_MAX),
    "large": (AREA_MEDIUM_MAX, float("inf")),
}


# -- pixel confusion -----------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(*(np.zeros(num_classes, dtype=np.int64) for _ in range(3)))

    def add(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion_from_semantic(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Per-class pixel counts from (C, H, W) boolean semantic masks."""
    if pred.shape != gt.shape:
        raise ConfigError(f"semantic mask shapes differ: {pred.shape} vs {gt.shape}")
    pred = pred.astype(bool).reshape(pred.shape[0], -1)
    gt = gt.astype(bool).reshape(gt.shape[0], -1)
    tp = (pred & gt).sum(axis=1)
    fp = (pred & ~gt).sum(axis=1)
    fn = (~pred & gt).sum(axis=1)
    return ConfusionCounts(tp.astype(np.int64), fp.astype(np.int64), fn.astype(np.int64))


def per_class_dice(conf: ConfusionCounts) -> np.ndarray:
    denom = 2 * conf.tp + conf.fp + conf.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * conf.tp / denom, np.nan)


def per_class_iou(conf: ConfusionCounts) -> np.ndarray:
    denom = conf.tp + conf.fp + conf.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, conf.tp / denom, np.nan)


def _nan_mean(values: np.ndarray, what: str) -> float:
    valid = values[~np.isnan(values)]
    if valid.size == 0:
        raise DataError(f"{what} undefined: every class is empty in both prediction and truth")
    return float(valid.mean())


def mean_dice(conf: ConfusionCounts) -> float:
    """Class-averaged 2TP / (2TP + FP + FN); empty classes excluded."""
    return _nan_mean(per_class_dice(conf), "mDice")


def mean_iou(conf: ConfusionCounts) -> float:
    """Class-averaged TP / (TP + FP + FN); empty classes excluded."""
    return _nan_mean(per_class_iou(conf), "mIoU")


def semantic_from_instances(
    instances: Sequence, num_classes: int, height: int, width: int
) -> np.ndarray:
    """Union the instance masks into a (C, H, W) boolean semantic stack."""
    sem = np.zeros((num_classes, height, width), dtype=bool)
    for inst in instances:
        mask = inst.mask if inst.mask is not None else inst.ensure_mask(height, width)
        sem[inst.category] |= mask
    return sem


# -- detections and average precision --------------------------------------------------


@dataclass
class GroundTruth:
    category: int
    box: np.ndarray
    area: float
    mask: np.ndarray | None = None


@dataclass
class Detection:
    category: int
    box: np.ndarray
    score: float
    mask: np.ndarray | None = None


def _box_area(box) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


def _pair_iou(det: Detection, gt: GroundTruth, kind: str) -> float:
    if kind == "mask":
        if det.mask is None or gt.mask is None:
            raise ConfigError("mask IoU requested but a mask is missing")
        inter = np.logical_and(det.mask, gt.mask).sum()
        union = np.logical_or(det.mask, gt.mask).sum()
        return float(inter / union) if union else 0.0
    a, b = det.box, gt.box
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = _box_area(a) + _box_area(b) - inter
    return float(inter / union) if union else 0.0


def _det_area(det: Detection, kind: str) -> float:
    if kind == "mask" and det.mask is not None:
        return float(det.mask.sum())
    return _box_area(det.box)


def _gt_area(gt: GroundTruth) -> float:
    return float(gt.area)


def _match_class(
    dets: list[tuple[int, int, Detection]],
    gts: list[tuple[int, GroundTruth]],
    threshold: float,
    area_range: tuple[float, float] | None,
    kind: str,
):
    """Greedy per-image matching at one threshold.

    Returns (scores, tp flags, ignore flags, n_visible_gt) across images, with
    deterministic ordering (score desc, then image, then detection index).
    Ground truths outside the area range are ignorable: matching one neither
    rewards nor punishes; unmatched detections outside the range are ignored
    too.
    """
    lo, hi = area_range if area_range is not None else (0.0, float("inf"))
    gt_by_image: dict[int, list] = {}
    n_visible = 0
    for img, gt in gts:
        ignored = not (lo <= _gt_area(gt) < hi)
        n_visible += 0 if ignored else 1
        gt_by_image.setdefault(img, []).append([gt, ignored, False])

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2].score, dets[i][0], dets[i][1]))
    scores = np.empty(len(dets))
    tp = np.zeros(len(dets), dtype=bool)
    ignore = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        img, _, det = dets[i]
        scores[rank] = det.score
        best_iou, best_j, best_ignored = threshold, -1, False
        for j, (gt, gt_ignored, matched) in enumerate(gt_by_image.get(img, [])):
            if matched:
                continue
            iou = _pair_iou(det, gt, kind)
            if iou < best_iou:
                continue
            if best_j >= 0 and not best_ignored and gt_ignored:
                continue  # keep a real match over an ignorable one
            if iou > best_iou or best_j < 0 or (best_ignored and not gt_ignored):
                best_iou, best_j, best_ignored = iou, j, gt_ignored
        if best_j >= 0:
            gt_by_image[img][best_j][2] = True
            if best_ignored:
                ignore[rank] = True
            else:
                tp[rank] = True
        elif not (lo <= _det_area(det, kind) < hi):
            ignore[rank] = True
    return scores, tp, ignore, n_visible


def _ap_from_flags(tp: np.ndarray, ignore: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        return float("nan")
    keep = ~ignore
    tp = tp[keep]
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # running max from the right, then sample the 101-point recall grid
    prec_interp = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, grid, side="left")
    sampled = np.where(idx < recall.size, prec_interp[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(
    detections: Sequence[Sequence[Detection]],
    ground_truths: Sequence[Sequence[GroundTruth]],
    num_classes: int,
    threshold: float,
    area_range: tuple[float, float] | None = None,
    kind: str = "box",
) -> np.ndarray:
    """Per-class AP at one IoU threshold; NaN for classes with no visible GT."""
    if len(detections) != len(ground_truths):
        raise ConfigError("detections and ground truths must cover the same images")
    ap = np.full(num_classes, np.nan)
    for c in range(num_classes):
        dets = [
            (img, i, d)
            for img, dlist in enumerate(detections)
            for i, d in enumerate(dlist)
            if d.category == c
        ]
        gts = [(img, g) for img, glist in enumerate(ground_truths) for g in glist if g.category == c]
        if not gts:
            continue
        scores, tp, ignore, n_visible = _match_class(dets, gts, threshold, area_range, kind)
        ap[c] = _ap_from_flags(tp, ignore, n_visible) if n_visible else np.nan
    return ap


def coco_map(
    detections: Sequence[Sequence[Detection]],
    ground_truths: Sequence[Sequence[GroundTruth]],
    num_classes: int,
    iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
    area_range: tuple[float, float] | None = None,
    kind: str = "box",
) -> dict:
    """mAP over the threshold ladder plus the per-threshold values."""
    per_threshold = {}
    cells = []
    for t in iou_thresholds:
        ap = average_precision(detections, ground_truths, num_classes, t, area_range, kind)
        cells.append(ap)
        valid = ap[~np.isnan(ap)]
        per_threshold[float(t)] = float(valid.mean()) if valid.size else float("nan")
    stacked = np.stack(cells)
    valid = stacked[~np.isnan(stacked)]
    return {
        "mAP": float(valid.mean()) if valid.size else float("nan"),
        "per_threshold": per_threshold,
    }


def scale_stratified_ap(
    detections, ground_truths, num_classes, kind: str = "box"
) -> dict[str, float]:
    """AP_S / AP_M / AP_L: mAP restricted to each COCO area stratum."""
    out = {}
    for name in ("small", "medium", "large"):
        out[name] = coco_map(
            detections, ground_truths, num_classes, area_range=AREA_RANGES[name], kind=kind
        )["mAP"]
    return out


# -- latency -----------------------------------------------------------------------


def benchmark_latency(step: Callable[[], object], iterations: int = 30, warmup: int = 5) -> dict:
    """Wall-clock stats for an end-to-end single-image step (batch size 1)."""
    if iterations < 30:
        raise ConfigError("latency statistics need at least 30 timed iterations")
    for _ in range(warmup):
        step()
    times = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter()
        step()
        times[i] = time.perf_counter() - t0
    return {
        "iterations": iterations,
        "batch_size": 1,
        "mean_s": float(times.mean()),
        "p50_s": float(np.percentile(times, 50)),
        "p99_s": float(np.percentile(times, 99)),
        "fps": float(1.0 / times.mean()),
    }


def format_latency_report(stats: dict) -> str:
    lines = ["metric\tvalue"]
    for key in ("iterations", "batch_size", "mean_s", "p50_s", "p99_s", "fps"):
        val = stats[key]
        lines.append(f"{key}\t{val:.6g}" if isinstance(val, float) else f"{key}\t{val}")
    return "\n".join(lines)


# -- combined report ------------------------------------------------------------------


@dataclass
class MetricsReport:
    num_classes: int
    det_map: float = float("nan")
    det_ap50: float = float("nan")
    ap_small: float = float("nan")
    ap_medium: float = float("nan")
    ap_large: float = float("nan")
    seg_map: float = float("nan")
    seg_ap50: float = float("nan")
    miou: float = float("nan")
    mdice: float = float("nan")
    params: int | None = None
    flops: int | None = None
    latency: dict | None = None
    pooling: str = "corpus-pooled pixel counts; empty classes excluded from means"

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "detection": {
                "mAP": self.det_map,
                "AP50": self.det_ap50,
                "AP_small": self.ap_small,
                "AP_medium": self.ap_medium,
                "AP_large": self.ap_large,
            },
            "segmentation": {"mAP": self.seg_map, "AP50": self.seg_ap50},
            "mIoU": self.miou,
            "mDice": self.mdice,
            "params": self.params,
            "flops": self.flops,
            "latency": self.latency,
            "pooling": self.pooling,
        }

    def format_text(self) -> str:
        def fmt(v):
            return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}" if isinstance(v, float) else str(v)

        rows = [
            ("classes", self.num_classes),
            ("det mAP", self.det_map),
            ("det AP50", self.det_ap50),
            ("AP_S", self.ap_small),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
            ("seg mAP", self.seg_map),
            ("seg AP50", self.seg_ap50),
            ("mIoU", self.miou),
            ("mDice", self.mdice),
            ("params", self.params),
            ("FLOPs", self.flops),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {fmt(v)}" for k, v in rows]
        if self.latency:
            lines.append(
                f"{'latency':<{width}}  mean {self.latency['mean_s'] * 1e3:.2f} ms"
                f"  p50 {self.latency['p50_s'] * 1e3:.2f} ms"
                f"  p99 {self.latency['p99_s'] * 1e3:.2f} ms"
                f"  ({self.latency['fps']:.1f} img/s)"
            )
        lines.append(f"({self.pooling})")
        return "\n".join(lines)
