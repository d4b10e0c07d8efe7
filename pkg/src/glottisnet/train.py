"""Training loop: decoupled-weight-decay Adam, cosine learning-rate decay to
zero, photometric augmentation from counter-based streams, and the
assignment-driven multi-task step (quality-focal cls + GIoU box + soft-Dice
mask)."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .assign import AssignerConfig, assemble_cost_matrix, assign
from .data import Instance, SceneRecord
from .errors import ConfigError, NumericError
from .losses import dice_mask_loss, giou_box_loss, quality_focal_loss
from .metrics import (
    ConfusionCounts,
    GroundTruth,
    MetricsReport,
    coco_map,
    confusion_from_semantic,
    mean_dice,
    mean_iou,
    scale_stratified_ap,
    semantic_from_instances,
)
from .network import (
    GlottisNet,
    decode_boxes_np,
    decode_boxes_tensor,
    decode_detections,
    flatten_level_maps,
    prior_arrays,
    prior_points,
    save_checkpoint,
)
from .rng import counter_stream
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    lr: float = 5e-4
    weight_decay: float = 0.05
    seed: int = 0
    cls_loss_weight: float = 1.0
    box_loss_weight: float = 2.0
    mask_loss_weight: float = 1.0
    grad_clip_norm: float = 35.0
    aug_prob: float = 0.5
    aug_brightness: float = 32.0 / 255.0
    aug_contrast: tuple[float, float] = (0.5, 1.5)
    aug_saturation: tuple[float, float] = (0.5, 1.5)
    eval_every: int = 1
    # optional early exit once both validation targets are reached
    target_mdice: float | None = None
    target_ap50: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs/batch size must be positive and lr > 0")


#: the published training recipe; the default above is the desk-scale variant
PAPER_SCALE_TRAIN = TrainConfig(epochs=500, batch_size=128)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base * 0.5 * (1 + cos(pi t / T)): base at t=0, exactly 0 at t=T."""
    if total_steps <= 0:
        return base_lr
    t = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / total_steps))


class AdamW:
    """Adam with decoupled weight decay: every parameter shrinks by
    (1 - lr * wd) each step regardless of its gradient."""

    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        weight_decay: float = 0.05,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for (name, p), m, v in zip(self.params, self.m, self.v):
            p.data *= 1.0 - lr * self.weight_decay
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_grad_norm(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -- augmentation ---------------------------------------------------------------------


def photometric_distortion(image: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """Brightness/contrast/saturation jitter, each applied with cfg.aug_prob."""
    img = image.copy()
    if rng.random() < cfg.aug_prob:
        img += rng.uniform(-cfg.aug_brightness, cfg.aug_brightness)
    if rng.random() < cfg.aug_prob:
        img *= rng.uniform(*cfg.aug_contrast)
    if rng.random() < cfg.aug_prob:
        gray = img.mean(axis=0, keepdims=True)
        img = gray + (img - gray) * rng.uniform(*cfg.aug_saturation)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# -- one optimizer step -----------------------------------------------------------------


def _downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    h, w = mask.shape
    return mask.reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3))


def compute_losses(
    model: GlottisNet,
    images: np.ndarray,
    instances: list[list[Instance]],
    acfg: AssignerConfig,
    tcfg: TrainConfig,
):
    """Forward plus the three weighted losses for one batch (tape attached)."""
    n, _, h, w = images.shape
    preds = model(Tensor(images), training=True)
    priors_pts = prior_points(model.cfg, h, w)
    priors = prior_arrays(model.cfg, h, w)
    num_p = len(priors_pts)
    num_c = model.cfg.num_classes
    proto_stride = model.cfg.strides[0]
    h8, w8 = h // proto_stride, w // proto_stride
    m = h8 * w8

    cls_flat = flatten_level_maps(preds.cls_logits)
    box_flat = flatten_level_maps(preds.box_offsets)
    coef_flat = flatten_level_maps(preds.mask_coeffs)
    box_2d = T.reshape(box_flat, (n * num_p, 4))
    coef_2d = T.reshape(coef_flat, (n * num_p, model.cfg.mask_protos))
    protos_2d = T.reshape(preds.prototypes, (n, model.cfg.mask_protos * m))

    cls_targets = np.zeros((n, num_p, num_c), dtype=np.float32)
    pos_global: list[int] = []
    pos_gt_boxes: list[np.ndarray] = []
    mask_terms: list[tuple] = []

    with T.no_grad():
        box_np = box_2d.data.reshape(n, num_p, 4)
        probs_np = _sigmoid_np(cls_flat.data)
    for i in range(n):
        insts = instances[i]
        if not insts:
            continue
        gt_boxes = np.stack([inst.box for inst in insts])
        gt_labels = np.array([inst.category for inst in insts])
        decoded = decode_boxes_np(box_np[i], priors)
        cost = assemble_cost_matrix(priors_pts, decoded, probs_np[i], gt_boxes, gt_labels, acfg)
        result = assign(cost, acfg)
        pos_local, crops, targets = [], [], []
        for g, plist in enumerate(result.gt_priors):
            inst = insts[g]
            # binarized majority vote per prototype cell: exactly fittable,
            # so the dice loss has no soft-target floor
            mask_small = (
                _downsample_mask(inst.ensure_mask(h, w).astype(np.float32), proto_stride) > 0.5
            ).astype(np.float32)
            x1, y1, x2, y2 = inst.box
            crop = np.zeros((h8, w8), dtype=np.float32)
            crop[
                int(y1) // proto_stride : math.ceil(y2 / proto_stride),
                int(x1) // proto_stride : math.ceil(x2 / proto_stride),
            ] = 1.0
            for p in plist:
                cls_targets[i, p, inst.category] = cost.iou[p, g]
                pos_global.append(i * num_p + p)
                pos_gt_boxes.append(inst.box)
                pos_local.append(p)
                crops.append(crop.reshape(-1))
                targets.append(mask_small.reshape(-1))
        if pos_local:
            mask_terms.append((i, pos_local, np.stack(targets), np.stack(crops)))

    cls_loss = quality_focal_loss(
        T.reshape(cls_flat, (n * num_p, num_c)), cls_targets.reshape(n * num_p, num_c), acfg.gamma
    )

    if pos_global:
        idx = np.asarray(pos_global)
        offs_pos = T.take_rows(box_2d, idx)
        local = idx % num_p
        pos_prior_arrays = {k: priors[k][local] for k in ("x", "y", "stride")}
        decoded_pos = decode_boxes_tensor(offs_pos, pos_prior_arrays)
        box_loss = giou_box_loss(decoded_pos, np.stack(pos_gt_boxes))

        total_pos = len(pos_global)
        mask_loss = None
        for i, pos_local, targets, crops in mask_terms:
            coefs = T.take_rows(coef_2d, np.asarray(pos_local) + i * num_p)
            protos_i = T.reshape(T.take_rows(protos_2d, [i]), (model.cfg.mask_protos, m))
            probs = T.sigmoid(T.matmul(coefs, protos_i))
            term = dice_mask_loss(probs, targets, crops) * (len(pos_local) / total_pos)
            mask_loss = term if mask_loss is None else mask_loss + term
    else:
        box_loss = Tensor(np.zeros((), dtype=np.float32))
        mask_loss = Tensor(np.zeros((), dtype=np.float32))

    total = (
        tcfg.cls_loss_weight * cls_loss
        + tcfg.box_loss_weight * box_loss
        + tcfg.mask_loss_weight * mask_loss
    )
    parts = {
        "cls": float(cls_loss.item()),
        "box": float(box_loss.item()),
        "mask": float(mask_loss.item()),
        "total": float(total.item()),
    }
    return total, parts


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def train_step(
    model: GlottisNet,
    optimizer: AdamW,
    images: np.ndarray,
    instances: list[list[Instance]],
    acfg: AssignerConfig,
    tcfg: TrainConfig,
    lr: float,
) -> dict:
    total, parts = compute_losses(model, images, instances, acfg, tcfg)
    if not math.isfinite(parts["total"]):
        raise NumericError(f"non-finite training loss: {parts}")
    optimizer.zero_grad()
    total.backward()
    parts["grad_norm"] = clip_grad_norm(optimizer.params, tcfg.grad_clip_norm)
    optimizer.step(lr)
    parts["lr"] = lr
    return parts


# -- evaluation -------------------------------------------------------------------------


def calibrate_norm_stats(
    model: GlottisNet, images: list[np.ndarray], batch_size: int = 8, max_batches: int = 16
) -> None:
    """Re-estimate frozen normalization statistics with cumulative batch
    averages (precise-BN). Per-batch statistics drift from the running
    estimate through deep stacks; this pass replaces them with population
    values before inference."""
    mods = model.norm_modules()
    n = min(len(images), batch_size * max_batches)
    if n == 0:
        return
    for mod in mods:
        mod.running_mean.data[:] = 0.0
        mod.running_var.data[:] = 0.0
    t = 0
    for start in range(0, n, batch_size):
        t += 1
        for mod in mods:
            mod.bn_momentum = 1.0 / t
        batch = np.stack(images[start : start + batch_size])
        with T.no_grad():
            model(Tensor(batch), training=True)
    for mod in mods:
        mod.bn_momentum = 0.1


def evaluate_model(
    model: GlottisNet,
    records: list[SceneRecord],
    images: list[np.ndarray],
    full: bool = False,
    batch_size: int = 8,
) -> MetricsReport:
    """Detections + confusion over a dataset; full adds seg AP and strata."""
    cfg = model.cfg
    num_c = cfg.num_classes
    all_dets, all_gts = [], []
    conf = ConfusionCounts.zeros(num_c)
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = np.stack(images[start : start + batch_size])
        h, w = batch.shape[2:]
        with T.no_grad():
            preds = model(Tensor(batch), training=False)
        dets_batch = decode_detections(preds, cfg, (h, w))
        for rec, dets in zip(chunk, dets_batch):
            gts = [
                GroundTruth(inst.category, inst.box, inst.area, inst.ensure_mask(h, w))
                for inst in rec.instances
            ]
            all_dets.append(dets)
            all_gts.append(gts)
            pred_sem = np.zeros((num_c, h, w), dtype=bool)
            for d in dets:
                if d.mask is not None:
                    pred_sem[d.category] |= d.mask
            gt_sem = semantic_from_instances(rec.instances, num_c, h, w)
            conf = conf.add(confusion_from_semantic(pred_sem, gt_sem))

    det = coco_map(all_dets, all_gts, num_c, kind="box")
    report = MetricsReport(
        num_classes=num_c,
        det_map=det["mAP"],
        det_ap50=det["per_threshold"][0.5],
        mdice=mean_dice(conf),
        miou=mean_iou(conf),
    )
    if full:
        seg = coco_map(all_dets, all_gts, num_c, kind="mask")
        report.seg_map = seg["mAP"]
        report.seg_ap50 = seg["per_threshold"][0.5]
        strata = scale_stratified_ap(all_dets, all_gts, num_c, kind="box")
        report.ap_small = strata["small"]
        report.ap_medium = strata["medium"]
        report.ap_large = strata["large"]
    return report


# -- full loop ---------------------------------------------------------------------------

LOG_HEADER = "epoch\tlr\tcls_loss\tbox_loss\tmask_loss\tval_mDice\tval_AP50"


def train_model(
    model: GlottisNet,
    train_records: list[SceneRecord],
    train_images: list[np.ndarray],
    val_records: list[SceneRecord],
    val_images: list[np.ndarray],
    acfg: AssignerConfig,
    tcfg: TrainConfig,
    out_dir=None,
) -> dict:
    """Train with per-epoch validation; returns the history and writes a
    per-epoch log plus the best-val-mDice checkpoint when out_dir is given."""
    n = len(train_records)
    if n == 0:
        raise ConfigError("empty training set")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = AdamW(model.trainable_tensors(), weight_decay=tcfg.weight_decay)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    instances = [r.instances for r in train_records]
    history = {"epochs": [], "log_lines": [LOG_HEADER]}
    best_mdice = -1.0
    step = 0
    for epoch in range(tcfg.epochs):
        order = counter_stream(tcfg.seed, "data-order", epoch).permutation(n)
        epoch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]
            batch_imgs = np.stack(
                [
                    photometric_distortion(
                        train_images[j], counter_stream(tcfg.seed, "augment", epoch * n + int(j)), tcfg
                    )
                    for j in idx
                ]
            )
            batch_insts = [instances[j] for j in idx]
            lr = cosine_lr(tcfg.lr, step, total_steps)
            parts = train_step(model, optimizer, batch_imgs, batch_insts, acfg, tcfg, lr)
            epoch_losses.append(parts)
            step += 1

        mean_parts = {
            k: float(np.mean([p[k] for p in epoch_losses])) for k in ("cls", "box", "mask", "total")
        }
        val_mdice, val_ap50 = float("nan"), float("nan")
        if val_records and (epoch % tcfg.eval_every == 0 or epoch == tcfg.epochs - 1):
            calibrate_norm_stats(model, train_images, batch_size=tcfg.batch_size)
            report = evaluate_model(model, val_records, val_images, batch_size=tcfg.batch_size)
            val_mdice, val_ap50 = report.mdice, report.det_ap50
            if out_dir is not None and val_mdice > best_mdice:
                save_checkpoint(model, out_dir / "best.ckpt")
            best_mdice = max(best_mdice, val_mdice)
        line = (
            f"{epoch}\t{cosine_lr(tcfg.lr, step - 1, total_steps):.6g}"
            f"\t{mean_parts['cls']:.6f}\t{mean_parts['box']:.6f}\t{mean_parts['mask']:.6f}"
            f"\t{val_mdice:.4f}\t{val_ap50:.4f}"
        )
        history["log_lines"].append(line)
        history["epochs"].append({**mean_parts, "val_mdice": val_mdice, "val_ap50": val_ap50})
        if out_dir is not None:
            (out_dir / "training_log.tsv").write_text("\n".join(history["log_lines"]) + "\n")
        if (
            tcfg.target_mdice is not None
            and tcfg.target_ap50 is not None
            and val_mdice >= tcfg.target_mdice
            and val_ap50 >= tcfg.target_ap50
        ):
            break
    if out_dir is not None and best_mdice < 0:
        save_checkpoint(model, out_dir / "best.ckpt")
    return history


def overfit(
    model: GlottisNet,
    images: list[np.ndarray],
    instances: list[list[Instance]],
    acfg: AssignerConfig,
    steps: int = 300,
    lr: float = 2e-3,
    tcfg: TrainConfig | None = None,
) -> list[float]:
    """Fixed-batch overfit run (no augmentation, cosine-annealed lr); returns
    the total-loss trajectory. The convergence sanity check drives this."""
    tcfg = tcfg or TrainConfig(weight_decay=0.0, grad_clip_norm=35.0)
    optimizer = AdamW(model.trainable_tensors(), weight_decay=tcfg.weight_decay)
    batch = np.stack(images)
    losses = []
    for step in range(steps):
        parts = train_step(model, optimizer, batch, instances, acfg, tcfg, cosine_lr(lr, step, steps))
        losses.append(parts["total"])
    return losses
