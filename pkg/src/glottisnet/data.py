"""Synthetic scene generation, polygon rasterization, and portable I/O.

Scenes imitate the geometry of the target task: elliptical anatomy-like
instances whose areas span the small/medium/large evaluation strata, placed
in low-light clutter. Annotations round-trip through a COCO-subset JSON file
(bbox xywh, polygon segmentation, category ids); images are binary PPM to
avoid codec dependencies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .rng import substream

DEFAULT_CLASSES = ("glottic_slit", "left_valve", "right_valve", "nostril")

# fill color (RGB in [0,1]), aspect-ratio range, orientation range (radians)
_CLASS_STYLES = {
    "glottic_slit": ((0.05, 0.02, 0.05), (0.15, 0.35), (1.07, 2.07)),
    "left_valve": ((0.80, 0.42, 0.45), (0.45, 0.80), (0.20, 1.00)),
    "right_valve": ((0.50, 0.66, 0.85), (0.45, 0.80), (-1.00, -0.20)),
    "nostril": ((0.30, 0.17, 0.10), (0.70, 1.00), (0.0, math.pi)),
}

_BACKGROUND = np.array([0.36, 0.20, 0.18])


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 64
    width: int = 64
    classes: tuple[str, ...] = DEFAULT_CLASSES
    min_instances: int = 1
    max_instances: int = 3
    # instance area as a fraction of the image area, sampled log-uniformly
    area_fraction_range: tuple[float, float] = (0.002, 0.35)
    illumination_range: tuple[float, float] = (0.2, 1.0)
    clutter_count: int = 6
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError("scene dimensions too small")
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ConfigError("need at least one instance per image")
        lo, hi = self.area_fraction_range
        if not (0 < lo <= hi < 1):
            raise ConfigError("area fractions must satisfy 0 < lo <= hi < 1")
        for name in self.classes:
            if name not in _CLASS_STYLES:
                raise ConfigError(f"no style defined for class {name!r}")


#: 400x400 preset matching the phantom-image protocol; large-object areas
#: (>= 96^2 px) are geometrically impossible on the 64x64 desk default.
PID_MIRROR_SPEC = SyntheticSceneSpec(height=400, width=400)


@dataclass
class Instance:
    category: int
    box: np.ndarray  # xyxy, pixel units
    polygon: np.ndarray  # (V, 2) float vertices
    area: int
    mask: np.ndarray | None = None  # bool (H, W); lazily rebuilt from polygon

    def ensure_mask(self, height: int, width: int) -> np.ndarray:
        if self.mask is None:
            self.mask = rasterize_polygon(self.polygon, height, width)
        return self.mask


@dataclass
class SceneRecord:
    image_id: int
    file_name: str
    height: int
    width: int
    instances: list[Instance]


# -- polygon rasterization -------------------------------------------------------


def rasterize_polygon(polygon, height: int, width: int) -> np.ndarray:
    """Fill a polygon on the pixel grid: a pixel is inside when its center
    (col + 0.5, row + 0.5) satisfies the even-odd crossing rule."""
    pts = np.asarray(polygon, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] < 3:
        raise ConfigError("polygon needs at least three vertices")
    mask = np.zeros((height, width), dtype=bool)
    r0 = max(0, int(math.floor(pts[:, 1].min() - 0.5)))
    r1 = min(height - 1, int(math.ceil(pts[:, 1].max())))
    c0 = max(0, int(math.floor(pts[:, 0].min() - 0.5)))
    c1 = min(width - 1, int(math.ceil(pts[:, 0].max())))
    if r1 < r0 or c1 < c0:
        return mask
    ys = np.arange(r0, r1 + 1, dtype=np.float64) + 0.5
    xs = np.arange(c0, c1 + 1, dtype=np.float64) + 0.5
    crossings = np.zeros((ys.size, xs.size), dtype=np.int64)
    x1s, y1s = pts[:, 0], pts[:, 1]
    x2s, y2s = np.roll(pts[:, 0], -1), np.roll(pts[:, 1], -1)
    for x1, y1, x2, y2 in zip(x1s, y1s, x2s, y2s):
        if y1 == y2:
            continue
        ylo, yhi = (y1, y2) if y1 < y2 else (y2, y1)
        rows = (ys >= ylo) & (ys < yhi)
        if not rows.any():
            continue
        xint = x1 + (ys[rows] - y1) * (x2 - x1) / (y2 - y1)
        crossings[rows] += xs[None, :] < xint[:, None]
    mask[r0 : r1 + 1, c0 : c1 + 1] = (crossings % 2) == 1
    return mask


def mask_tight_box(mask: np.ndarray) -> np.ndarray:
    """Tight xyxy box around the true pixels (empty mask is a config error)."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ConfigError("cannot box an empty mask")
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


# -- scene synthesis --------------------------------------------------------------


def _ellipse_polygon(cx, cy, a, b, theta, vertices=36):
    t = np.linspace(0.0, 2.0 * math.pi, vertices, endpoint=False)
    ct, st = math.cos(theta), math.sin(theta)
    xs = cx + a * np.cos(t) * ct - b * np.sin(t) * st
    ys = cy + a * np.cos(t) * st + b * np.sin(t) * ct
    return np.stack([xs, ys], axis=1)


def _place_instance(spec: SyntheticSceneSpec, rng, occupied: np.ndarray):
    """Sample one non-overlapping instance; None when no placement fits."""
    h, w = spec.height, spec.width
    cat = int(rng.integers(0, len(spec.classes)))
    color, aspect_rng, orient_rng = _CLASS_STYLES[spec.classes[cat]]
    lo, hi = spec.area_fraction_range
    for _ in range(20):
        frac = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        area = frac * h * w
        q = rng.uniform(*aspect_rng)
        a = math.sqrt(area / (math.pi * q))
        b = a * q
        theta = rng.uniform(*orient_rng)
        ex = math.hypot(a * math.cos(theta), b * math.sin(theta)) + 1.0
        ey = math.hypot(a * math.sin(theta), b * math.cos(theta)) + 1.0
        if 2 * ex >= w or 2 * ey >= h:
            continue
        cx = rng.uniform(ex, w - ex)
        cy = rng.uniform(ey, h - ey)
        polygon = _ellipse_polygon(cx, cy, a, b, theta)
        mask = rasterize_polygon(polygon, h, w)
        if mask.sum() < 8:
            continue
        if (mask & occupied).any():
            continue
        box = mask_tight_box(mask)
        jitter = 1.0 + rng.uniform(-0.1, 0.1)
        fill = np.clip(np.asarray(color) * jitter, 0.0, 1.0)
        return Instance(cat, box, polygon, int(mask.sum()), mask), fill
    return None


def generate_scene(spec: SyntheticSceneSpec, rng) -> tuple[np.ndarray, list[Instance]]:
    """Render one scene: uint8 HxWx3 image plus its instances."""
    h, w = spec.height, spec.width
    img = np.empty((h, w, 3), dtype=np.float64)
    grad = (0.7 + 0.4 * np.linspace(0, 1, h))[:, None, None]
    img[:] = _BACKGROUND[None, None, :] * grad

    for _ in range(spec.clutter_count):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        ca = rng.uniform(1.0, 0.04 * min(h, w) + 2.0)
        cb = ca * rng.uniform(0.4, 1.0)
        poly = _ellipse_polygon(cx, cy, ca, cb, rng.uniform(0, math.pi))
        blob = rasterize_polygon(poly, h, w)
        tint = _BACKGROUND * rng.uniform(0.6, 1.5)
        img[blob] = np.clip(tint, 0, 1)

    occupied = np.zeros((h, w), dtype=bool)
    instances: list[Instance] = []
    n_target = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    attempts = 0
    while len(instances) < n_target and attempts < 12 * n_target:
        attempts += 1
        placed = _place_instance(spec, rng, occupied)
        if placed is None:
            continue
        inst, fill = placed
        occupied |= inst.mask
        img[inst.mask] = fill
        instances.append(inst)
    if not instances:
        raise ConfigError("could not place any instance; spec too constrained")

    gain = rng.uniform(*spec.illumination_range)
    img *= gain
    img += rng.normal(0.0, spec.noise_sigma, img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8), instances


def generate_dataset(spec: SyntheticSceneSpec, count: int, out_dir) -> list[SceneRecord]:
    """Write count scenes to out_dir/images plus a COCO-subset annotations.json."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        rng = substream(spec.seed, f"scene:{i}")
        img, instances = generate_scene(spec, rng)
        name = f"images/{i:06d}.ppm"
        write_ppm(out_dir / name, img)
        records.append(SceneRecord(i, name, spec.height, spec.width, instances))
    write_coco_subset(records, spec.classes, out_dir / "annotations.json")
    return records


# -- image I/O ---------------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ConfigError("write_ppm expects a uint8 HxWx3 array")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ConfigError("write_pgm expects a uint8 HxW array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def _read_pnm_header(raw: bytes, path) -> tuple[bytes, int, int, int]:
    fields = []
    pos = 2  # after magic
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header at byte {pos}")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise DataError(f"{path}: non-numeric header field {fields}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    return raw[pos:], w, h, maxval


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise DataError(f"{path}: not a binary PPM (P6) file")
    payload, w, h, _ = _read_pnm_header(raw, path)
    if len(payload) < 3 * w * h:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, expected {3 * w * h}")
    return np.frombuffer(payload[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    payload, w, h, _ = _read_pnm_header(raw, path)
    if len(payload) < w * h:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w).copy()


def load_image_chw(path) -> np.ndarray:
    """PPM file as float32 (3, H, W) in [0, 1]."""
    img = read_ppm(path)
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1)


# -- COCO-subset annotations -------------------------------------------------------


def write_coco_subset(records: Sequence[SceneRecord], classes: Sequence[str], path) -> None:
    doc = {
        "images": [
            {"id": r.image_id, "file_name": r.file_name, "width": r.width, "height": r.height}
            for r in records
        ],
        "annotations": [],
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(classes)],
    }
    ann_id = 1
    for r in records:
        for inst in r.instances:
            x1, y1, x2, y2 = inst.box
            doc["annotations"].append(
                {
                    "id": ann_id,
                    "image_id": r.image_id,
                    "category_id": inst.category + 1,
                    "bbox": [float(x1), float(y1), float(x2 - x1), float(y2 - y1)],
                    "area": int(inst.area),
                    "segmentation": [[float(v) for v in inst.polygon.reshape(-1)]],
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _require(obj: dict, key: str, where: str, path):
    if key not in obj:
        raise DataError(f"{path}: {where} missing required key {key!r}")
    return obj[key]


def read_coco_subset(path) -> tuple[list[SceneRecord], tuple[str, ...]]:
    """Parse annotations back into SceneRecords; malformed files raise DataError
    with location diagnostics."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}")
    for key in ("images", "annotations", "categories"):
        _require(doc, key, "document", path)

    categories = sorted(doc["categories"], key=lambda c: c["id"])
    classes = tuple(_require(c, "name", "category", path) for c in categories)
    id_to_index = {c["id"]: i for i, c in enumerate(categories)}

    records: dict[int, SceneRecord] = {}
    for i, im in enumerate(doc["images"]):
        image_id = _require(im, "id", f"images[{i}]", path)
        records[image_id] = SceneRecord(
            image_id,
            _require(im, "file_name", f"images[{i}]", path),
            int(_require(im, "height", f"images[{i}]", path)),
            int(_require(im, "width", f"images[{i}]", path)),
            [],
        )
    for i, ann in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        image_id = _require(ann, "image_id", where, path)
        if image_id not in records:
            raise DataError(f"{path}: {where} references unknown image {image_id}")
        cat_id = _require(ann, "category_id", where, path)
        if cat_id not in id_to_index:
            raise DataError(f"{path}: {where} references unknown category {cat_id}")
        x, y, bw, bh = _require(ann, "bbox", where, path)
        seg = _require(ann, "segmentation", where, path)
        if not seg or not isinstance(seg, list):
            raise DataError(f"{path}: {where} has empty segmentation")
        polygon = np.asarray(seg[0], dtype=np.float64).reshape(-1, 2)
        records[image_id].instances.append(
            Instance(
                id_to_index[cat_id],
                np.array([x, y, x + bw, y + bh], dtype=np.float64),
                polygon,
                int(_require(ann, "area", where, path)),
            )
        )
    ordered = [records[k] for k in sorted(records)]
    return ordered, classes


def load_dataset(root) -> tuple[list[SceneRecord], tuple[str, ...], list[np.ndarray]]:
    """Records, class names, and float32 CHW images for a generated dataset dir."""
    root = Path(root)
    ann = root / "annotations.json"
    if not ann.exists():
        raise DataError(f"{root}: no annotations.json found")
    records, classes = read_coco_subset(ann)
    images = [load_image_chw(root / r.file_name) for r in records]
    return records, classes, images
