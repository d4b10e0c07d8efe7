"""GlottisNet assembly: stacked multi-receptive-field backbone, bidirectional
pyramid neck, and 1x1-convolution-only heads for classification, box
regression, and prototype-based mask generation.

The same block type is reused across backbone and neck; the neck adds a
bottom-up pathway and normalizes the three output maps to one channel width
through depthwise-separable 3x3 stages. Heads contain nothing but 1x1
convolutions.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .assign import PriorPoint
from .blocks import DWCM, ConvModule, DepthwiseSeparable, LightSRM, LightSRMConfig, SPPF
from .data import write_pgm
from .errors import ConfigError, DataError
from .metrics import Detection
from .rng import substream
from .tensor import Tensor

_CKPT_MAGIC = b"GNCKPT01"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    base_channels: int = 16
    stage_multipliers: tuple[int, ...] = (2, 4, 8, 8)
    neck_channels: int = 64
    num_classes: int = 4
    mask_protos: int = 8
    strides: tuple[int, ...] = (8, 16, 32)
    dilations: tuple[int, ...] = (1, 2, 5)
    attention_reduction: int = 4
    reduced_shortcut: bool = True
    depthwise_neck: bool = True
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 100

    def __post_init__(self):
        if len(self.stage_multipliers) != 4:
            raise ConfigError("expected one multiplier per backbone stage (4)")
        if self.strides != (8, 16, 32):
            raise ConfigError("the three pyramid levels must sit at strides (8, 16, 32)")
        if self.base_channels < 2 or self.num_classes < 1 or self.mask_protos < 1:
            raise ConfigError("invalid channel/class/prototype counts")
        if not (0 <= self.score_thresh <= 1 and 0 <= self.nms_iou <= 1):
            raise ConfigError("thresholds must lie in [0, 1]")


@dataclass
class RawPredictions:
    """Per-level head outputs plus the shared mask prototypes.

    Box offsets are non-negative (l, t, r, b) distances in stride units; the
    decoded box of prior (x, y) at stride s is (x - l s, y - t s, x + r s,
    y + b s).
    """

    cls_logits: list[Tensor]
    box_offsets: list[Tensor]
    mask_coeffs: list[Tensor]
    prototypes: Tensor
    strides: tuple[int, ...]


class GlottisNet:
    """The assembled model; construct via build_model for seeded determinism."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c = cfg.base_channels
        stage_ch = [c * m for m in cfg.stage_multipliers]
        dil = tuple(cfg.dilations)
        red = cfg.attention_reduction

        def srm(cin, cout, with_shortcut=True):
            return LightSRM(
                rng,
                LightSRMConfig(
                    cin,
                    cout,
                    dilations=dil,
                    attention_reduction=red,
                    with_shortcut=with_shortcut,
                    depthwise_shortcut=cfg.depthwise_neck,
                ),
                dtype=dtype,
            )

        # backbone: stem /2, then four stride-2 stages ending at /32
        self.stem = ConvModule(rng, cfg.in_channels, c, 3, stride=2, dtype=dtype)
        self.down1 = ConvModule(rng, c, stage_ch[0], 3, stride=2, dtype=dtype)
        self.stage1 = srm(stage_ch[0], stage_ch[0])
        self.down2 = ConvModule(rng, stage_ch[0], stage_ch[1], 3, stride=2, dtype=dtype)
        self.stage2 = srm(stage_ch[1], stage_ch[1])
        self.down3 = ConvModule(rng, stage_ch[1], stage_ch[2], 3, stride=2, dtype=dtype)
        self.stage3 = srm(stage_ch[2], stage_ch[2])
        self.down4 = ConvModule(rng, stage_ch[2], stage_ch[3], 3, stride=2, dtype=dtype)
        self.stage4 = srm(stage_ch[3], stage_ch[3])
        self.sppf = SPPF(rng, stage_ch[3], stage_ch[3], dtype=dtype)

        # neck: lateral 1x1s, top-down then bottom-up fusion, DWCM outputs
        w = cfg.neck_channels
        self.lateral3 = ConvModule(rng, stage_ch[1], w, 1, dtype=dtype)
        self.lateral4 = ConvModule(rng, stage_ch[2], w, 1, dtype=dtype)
        self.lateral5 = ConvModule(rng, stage_ch[3], w, 1, dtype=dtype)
        self.topdown4 = srm(2 * w, w)
        self.topdown3 = srm(2 * w, w)
        bottomup_shortcut = not cfg.reduced_shortcut
        self.bottomup4 = srm(2 * w, w, with_shortcut=bottomup_shortcut)
        self.bottomup5 = srm(2 * w, w, with_shortcut=bottomup_shortcut)
        if cfg.depthwise_neck:
            self.downsample3 = DWCM(rng, w, w, stride=2, dtype=dtype)
            self.downsample4 = DWCM(rng, w, w, stride=2, dtype=dtype)
            self.out3 = DWCM(rng, w, w, dtype=dtype)
            self.out4 = DWCM(rng, w, w, dtype=dtype)
            self.out5 = DWCM(rng, w, w, dtype=dtype)
        else:
            self.downsample3 = ConvModule(rng, w, w, 3, stride=2, dtype=dtype)
            self.downsample4 = ConvModule(rng, w, w, 3, stride=2, dtype=dtype)
            self.out3 = ConvModule(rng, w, w, 3, dtype=dtype)
            self.out4 = ConvModule(rng, w, w, 3, dtype=dtype)
            self.out5 = ConvModule(rng, w, w, 3, dtype=dtype)

        # heads: one 1x1 conv per task, shared across the three levels
        self.head_cls = ConvModule(rng, w, cfg.num_classes, 1, norm=False, act=None, dtype=dtype)
        self.head_cls.bias.data[:] = -math.log(99.0)  # initial foreground prob ~0.01
        self.head_box = ConvModule(rng, w, 4, 1, norm=False, act=None, dtype=dtype)
        self.head_coef = ConvModule(rng, w, cfg.mask_protos, 1, norm=False, act=None, dtype=dtype)
        self.head_proto_hidden = ConvModule(rng, w, w, 1, norm=False, act="silu", dtype=dtype)
        self.head_proto_out = ConvModule(
            rng, w, cfg.mask_protos, 1, norm=False, act=None, dtype=dtype
        )

    # -- dataflow -------------------------------------------------------------

    def _neck(self, p3, p4, p5, training, record=None):
        l3 = self.lateral3(p3, training)
        l4 = self.lateral4(p4, training)
        l5 = self.lateral5(p5, training)
        t4 = self.topdown4(T.concat_channels(T.upsample_nearest(l5, 2), l4), training)
        t3 = self.topdown3(T.concat_channels(T.upsample_nearest(t4, 2), l3), training)
        b4 = self.bottomup4(T.concat_channels(self.downsample3(t3, training), t4), training)
        b5 = self.bottomup5(T.concat_channels(self.downsample4(b4, training), l5), training)
        if record is not None:
            record["neck.topdown4"] = t4
            record["neck.topdown3"] = t3
            record["neck.bottomup4"] = b4
            record["neck.bottomup5"] = b5
        return (
            self.out3(t3, training),
            self.out4(b4, training),
            self.out5(b5, training),
        )

    def __call__(self, image: Tensor, training: bool = False, record: dict | None = None) -> RawPredictions:
        n, c, h, w = image.shape
        if c != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} input channels, got {c}")
        if h % 32 or w % 32:
            raise ConfigError(f"input spatial dims must be divisible by 32, got {h}x{w}")
        x = self.stem(image, training)
        x = self.stage1(self.down1(x, training), training)
        p3 = self.stage2(self.down2(x, training), training)
        p4 = self.stage3(self.down3(p3, training), training)
        p5 = self.sppf(self.stage4(self.down4(p4, training), training), training)
        o3, o4, o5 = self._neck(p3, p4, p5, training, record)

        cls_logits, box_offsets, mask_coeffs = [], [], []
        for feat in (o3, o4, o5):
            cls_logits.append(self.head_cls(feat, training))
            raw = self.head_box(feat, training)
            box_offsets.append(T.clamp(raw, 0.0, None, straight_through=True))
            mask_coeffs.append(self.head_coef(feat, training))
        protos = self.head_proto_out(self.head_proto_hidden(o3, training), training)
        return RawPredictions(cls_logits, box_offsets, mask_coeffs, protos, self.cfg.strides)

    # -- bookkeeping ------------------------------------------------------------

    def _modules(self):
        for name in (
            "stem", "down1", "stage1", "down2", "stage2", "down3", "stage3",
            "down4", "stage4", "sppf", "lateral3", "lateral4", "lateral5",
            "topdown4", "topdown3", "downsample3", "bottomup4", "downsample4",
            "bottomup5", "out3", "out4", "out5", "head_cls", "head_box",
            "head_coef", "head_proto_hidden", "head_proto_out",
        ):
            yield name, getattr(self, name)

    def named_tensors(self):
        for name, module in self._modules():
            yield from module.named_tensors(name)

    def trainable_tensors(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def param_count(self) -> int:
        return sum(m.param_count() for _, m in self._modules())

    def flops(self, height: int, width: int) -> int:
        if height % 32 or width % 32:
            raise ConfigError("FLOP accounting needs dims divisible by 32")
        total = 0

        def run(module, hw):
            nonlocal total
            f, hw = module.flops(*hw)
            total += f
            return hw

        hw = run(self.stem, (height, width))
        hw = run(self.stage1, run(self.down1, hw))
        hw3 = run(self.stage2, run(self.down2, hw))
        hw4 = run(self.stage3, run(self.down3, hw3))
        hw5 = run(self.sppf, run(self.stage4, run(self.down4, hw4)))
        run(self.lateral3, hw3)
        run(self.lateral4, hw4)
        run(self.lateral5, hw5)
        run(self.topdown4, hw4)
        run(self.topdown3, hw3)
        run(self.downsample3, hw3)
        run(self.bottomup4, hw4)
        run(self.downsample4, hw4)
        run(self.bottomup5, hw5)
        run(self.out3, hw3)
        run(self.out4, hw4)
        run(self.out5, hw5)
        for hw_l in (hw3, hw4, hw5):
            run(self.head_cls, hw_l)
            run(self.head_box, hw_l)
            run(self.head_coef, hw_l)
        run(self.head_proto_hidden, hw3)
        run(self.head_proto_out, hw3)
        return total

    def head_kernel_sizes(self) -> list[tuple[int, int]]:
        """Kernel shapes of every convolution living in a prediction head."""
        sizes = []
        for name, module in self._modules():
            if name.startswith("head_"):
                sizes.append(tuple(module.weight.shape[2:]))
        return sizes

    def norm_modules(self) -> list:
        """Every ConvModule carrying batch statistics (for calibration)."""
        found = []

        def walk(module):
            if isinstance(module, ConvModule):
                if module.norm:
                    found.append(module)
            elif isinstance(module, DepthwiseSeparable):
                walk(module.depthwise)
                walk(module.pointwise)
            elif isinstance(module, SPPF):
                walk(module.reduce)
                walk(module.fuse)
            elif isinstance(module, LightSRM):
                for c in module.main_convs:
                    walk(c)
                if module.shortcut is not None:
                    walk(module.shortcut)
                walk(module.attention.reduce)
                walk(module.attention.expand)
                walk(module.fuse)

        for _, module in self._modules():
            walk(module)
        return found


def build_model(cfg: ModelConfig, seed: int) -> GlottisNet:
    """Deterministic weights from (config, seed)."""
    return GlottisNet(cfg, substream(seed, "init"))


def forward(model: GlottisNet, image: Tensor, training: bool = False) -> RawPredictions:
    return model(image, training)


# -- priors and decoding -----------------------------------------------------------


def prior_points(cfg: ModelConfig, height: int, width: int) -> list[PriorPoint]:
    """One anchor-free prior per feature cell per level, at pixel cell centers,
    in the same order the flattened head outputs use."""
    priors = []
    for level, s in enumerate(cfg.strides):
        hl, wl = height // s, width // s
        for i in range(hl):
            for j in range(wl):
                priors.append(PriorPoint(level, (j + 0.5) * s, (i + 0.5) * s, s))
    return priors


def prior_arrays(cfg: ModelConfig, height: int, width: int) -> dict[str, np.ndarray]:
    pts = prior_points(cfg, height, width)
    return {
        "x": np.array([p.x for p in pts], dtype=np.float64),
        "y": np.array([p.y for p in pts], dtype=np.float64),
        "stride": np.array([p.stride for p in pts], dtype=np.float64),
        "level": np.array([p.level for p in pts], dtype=np.int64),
    }


def flatten_level_maps(maps: Sequence[Tensor]) -> Tensor:
    """Per-level (N, C, H, W) maps to one (N, P, C) tensor, level-major then
    row-major, matching prior_points order."""
    flat = []
    for m in maps:
        n, c, h, w = m.shape
        flat.append(T.reshape(T.transpose(m, (0, 2, 3, 1)), (n, h * w, c)))
    return T.concat(flat, axis=1)


def decode_boxes_tensor(offsets: Tensor, priors: dict[str, np.ndarray]) -> Tensor:
    """(P, 4) stride-unit offsets to xyxy boxes, differentiable."""
    px, py, ps = priors["x"], priors["y"], priors["stride"]
    base = np.stack([px, py, px, py], axis=1).astype(offsets.data.dtype.type)
    scale = np.stack([-ps, -ps, ps, ps], axis=1).astype(offsets.data.dtype.type)
    return Tensor(base) + offsets * Tensor(scale)


def decode_boxes_np(offsets: np.ndarray, priors: dict[str, np.ndarray]) -> np.ndarray:
    px, py, ps = priors["x"], priors["y"], priors["stride"]
    base = np.stack([px, py, px, py], axis=1)
    scale = np.stack([-ps, -ps, ps, ps], axis=1)
    return base + offsets * scale


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resize of a 2-D array (half-pixel-centers convention)."""
    in_h, in_w = arr.shape
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.clip(y0 + 1, 0, in_h - 1)
    x1 = np.clip(x0 + 1, 0, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    return (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)


def _nms_class(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        bi = boxes[i]
        for j in order:
            if suppressed[j] or j == i:
                continue
            ix1 = max(bi[0], boxes[j][0])
            iy1 = max(bi[1], boxes[j][1])
            ix2 = min(bi[2], boxes[j][2])
            iy2 = min(bi[3], boxes[j][3])
            inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
            area_i = (bi[2] - bi[0]) * (bi[3] - bi[1])
            area_j = (boxes[j][2] - boxes[j][0]) * (boxes[j][3] - boxes[j][1])
            union = area_i + area_j - inter
            if union > 0 and inter / union > iou_thresh:
                suppressed[j] = True
    return keep


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decode_detections(
    preds: RawPredictions,
    cfg: ModelConfig,
    image_hw: tuple[int, int],
    score_thresh: float | None = None,
    nms_iou: float | None = None,
) -> list[list[Detection]]:
    """Score-thresholded, class-wise-NMS'd detections with instance masks.

    Each mask is sigmoid(sum_k coeff_k prototype_k) resized bilinearly to the
    image, binarized at 0.5, and cropped to the decoded box.
    """
    score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
    nms_iou = cfg.nms_iou if nms_iou is None else nms_iou
    if not (0 <= score_thresh <= 1 and 0 <= nms_iou <= 1):
        raise ConfigError("decode thresholds must lie in [0, 1]")
    h, w = image_hw
    priors = prior_arrays(cfg, h, w)
    with T.no_grad():
        cls_flat = flatten_level_maps(preds.cls_logits).data
        box_flat = flatten_level_maps(preds.box_offsets).data
        coef_flat = flatten_level_maps(preds.mask_coeffs).data
    protos = preds.prototypes.data
    n = cls_flat.shape[0]
    results: list[list[Detection]] = []
    for b in range(n):
        probs = _sigmoid(cls_flat[b])
        boxes = decode_boxes_np(box_flat[b], priors)
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h)
        dets: list[Detection] = []
        for c in range(cfg.num_classes):
            sel = np.flatnonzero(probs[:, c] > score_thresh)
            if sel.size == 0:
                continue
            cand_boxes = boxes[sel]
            valid = (cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1])
            sel, cand_boxes = sel[valid], cand_boxes[valid]
            if sel.size == 0:
                continue
            keep = _nms_class(cand_boxes, probs[sel, c], nms_iou)
            for k in keep:
                p = int(sel[k])
                mask_small = _sigmoid(np.tensordot(coef_flat[b, p], protos[b], axes=(0, 0)))
                mask = bilinear_resize(mask_small, h, w) > 0.5
                box = cand_boxes[k]
                crop = np.zeros_like(mask)
                y1, y2 = int(math.floor(box[1])), int(math.ceil(box[3]))
                x1, x2 = int(math.floor(box[0])), int(math.ceil(box[2]))
                crop[y1:y2, x1:x2] = mask[y1:y2, x1:x2]
                dets.append(Detection(c, box.copy(), float(probs[p, c]), crop))
        dets.sort(key=lambda d: -d.score)
        results.append(dets[: cfg.max_detections])
    return results


# -- accounting, activations, checkpoints ---------------------------------------------


def count_params_flops(cfg: ModelConfig, height: int = 64, width: int = 64) -> dict:
    """Exact parameter count and conv FLOPs (2 x multiply-accumulates)."""
    model = build_model(cfg, seed=0)
    return {"params": model.param_count(), "flops": model.flops(height, width)}


def dump_activations(model: GlottisNet, image: Tensor, out_dir) -> list[Path]:
    """Channel-mean maps of every neck block output, min-max scaled to [0, 255]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record: dict[str, Tensor] = {}
    with T.no_grad():
        model(image, training=False, record=record)
    paths = []
    for name, tensor in sorted(record.items()):
        mean_map = tensor.data[0].mean(axis=0)
        lo, hi = float(mean_map.min()), float(mean_map.max())
        if hi > lo:
            scaled = (mean_map - lo) / (hi - lo)
        else:
            scaled = np.zeros_like(mean_map)
        img = (scaled * 255).round().astype(np.uint8)
        path = out_dir / f"{name.replace('.', '_')}.pgm"
        write_pgm(path, img)
        paths.append(path)
    return paths


def save_checkpoint(model: GlottisNet, path) -> None:
    """magic + version + config JSON + named tensors (f64 little-endian)."""
    cfg_blob = json.dumps(dataclasses.asdict(model.cfg)).encode()
    tensors = list(model.named_tensors())
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> GlottisNet:
    """Rebuild the model from the stored config and validate every shape."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a GNCKPT01 checkpoint")
    pos = 8
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != _CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    try:
        cfg_dict = json.loads(raw[pos : pos + cfg_len])
        for key in ("stage_multipliers", "strides", "dilations"):
            cfg_dict[key] = tuple(cfg_dict[key])
        cfg = ModelConfig(**cfg_dict)
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: corrupt config blob ({exc})")
    pos += cfg_len
    model = build_model(cfg, seed=0)
    expected = dict(model.named_tensors())

    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        nbytes = 8 * int(np.prod(dims)) if ndim else 8
        payload = np.frombuffer(raw[pos : pos + nbytes], dtype="<f8").reshape(dims)
        pos += nbytes
        if name not in expected:
            raise DataError(f"{path}: unexpected tensor {name!r}")
        target = expected[name]
        if tuple(dims) != target.data.shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {tuple(dims)}, config implies {target.data.shape}"
            )
        target.data[...] = payload.astype(target.data.dtype)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)[:3]}...")
    return model
