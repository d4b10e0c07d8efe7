"""Command-line entry point for the whole pipeline.

Subcommands: gen, train, eval, rf-report, assign-debug, bench, activations.
Configuration is a flat dotted-key text file plus repeatable --set overrides;
the effective configuration is echoed into the run's output directory so
every run is reproducible from its artifacts. Exit codes: 0 ok, 2 config
error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .assign import AssignerConfig, assemble_cost_matrix, assign, format_assignment_debug
from .blocks import DilationSchedule, format_rf_report, rf_report_dict
from .data import (
    SyntheticSceneSpec,
    generate_dataset,
    load_dataset,
    load_image_chw,
)
from .errors import ConfigError, DataError, GlottisNetError, NumericError
from .metrics import benchmark_latency, format_latency_report
from .network import (
    ModelConfig,
    build_model,
    decode_detections,
    dump_activations,
    load_checkpoint,
    prior_arrays,
    prior_points,
    save_checkpoint,
)
from .tensor import Tensor
from .train import TrainConfig, calibrate_norm_stats, evaluate_model, train_model


# -- flat dotted-key configuration ------------------------------------------------------


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    """Lines of `dotted.key = value`; values are JSON scalars/lists when they
    parse, bare strings otherwise. '#' starts a comment."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = _parse_value(value)
    return out


def _parse_value(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _coerce(key: str, value, default):
    """Cast a parsed config value to the type of the dataclass default."""
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        if isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, float) and value != int(value):
                raise ConfigError(f"{key}: expected integer, got {value!r}")
            return int(value)
        if isinstance(default, float) or default is None:
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v != ""]
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key}: expected a list, got {value!r}")
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} ({exc})")
    raise ConfigError(f"{key}: unsupported config field type {type(default).__name__}")


def build_from_flat(cls, prefix: str, flat: dict, consumed: set[str]):
    """Instantiate a config dataclass from `prefix.field` keys."""
    kwargs = {}
    for field in dataclasses.fields(cls):
        key = f"{prefix}.{field.name}"
        if key in flat:
            kwargs[field.name] = _coerce(key, flat[key], field.default)
            consumed.add(key)
    return cls(**kwargs)


def take(flat: dict, key: str, consumed: set[str], default=None, required: bool = False):
    if key in flat:
        consumed.add(key)
        return flat[key]
    if required:
        raise ConfigError(f"missing required config key {key!r}")
    return default


def reject_unknown(flat: dict, consumed: set[str]) -> None:
    unknown = sorted(set(flat) - consumed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def echo_effective_config(out_dir: Path, flat: dict, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"seed = {seed}"]
    for key in sorted(flat):
        lines.append(f"{key} = {json.dumps(flat[key])}")
    (out_dir / "effective.cfg").write_text("\n".join(lines) + "\n")


def _load_model(flat: dict, consumed: set[str], seed: int):
    ckpt = take(flat, "checkpoint", consumed)
    if ckpt is not None:
        return load_checkpoint(ckpt)
    cfg = build_from_flat(ModelConfig, "model", flat, consumed)
    return build_model(cfg, seed)


# -- subcommands -------------------------------------------------------------------------


def cmd_gen(flat: dict, out_dir: Path, seed: int) -> None:
    consumed: set[str] = set()
    spec_kwargs = dataclasses.asdict(build_from_flat(SyntheticSceneSpec, "scene", flat, consumed))
    spec_kwargs["seed"] = seed
    count = int(take(flat, "count", consumed, default=100))
    reject_unknown(flat, consumed)
    records = generate_dataset(SyntheticSceneSpec(**spec_kwargs), count, out_dir)
    print(f"wrote {len(records)} images to {out_dir}")


def cmd_train(flat: dict, out_dir: Path, seed: int) -> None:
    consumed: set[str] = set()
    model_cfg = build_from_flat(ModelConfig, "model", flat, consumed)
    acfg = build_from_flat(AssignerConfig, "assign", flat, consumed)
    tcfg_raw = build_from_flat(TrainConfig, "train", flat, consumed)
    tcfg = dataclasses.replace(tcfg_raw, seed=seed)
    train_dir = take(flat, "data.train_dir", consumed, required=True)
    val_dir = take(flat, "data.val_dir", consumed, required=True)
    reject_unknown(flat, consumed)

    train_records, _, train_images = load_dataset(train_dir)
    val_records, _, val_images = load_dataset(val_dir)
    model = build_model(model_cfg, seed)
    history = train_model(
        model, train_records, train_images, val_records, val_images, acfg, tcfg, out_dir
    )
    calibrate_norm_stats(model, train_images, batch_size=tcfg.batch_size)
    save_checkpoint(model, out_dir / "last.ckpt")
    report = evaluate_model(model, val_records, val_images, full=True)
    report.params = model.param_count()
    report.flops = model.flops(val_records[0].height, val_records[0].width)
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out_dir / "metrics.txt").write_text(report.format_text() + "\n")
    print((out_dir / "training_log.tsv").read_text().rstrip())
    print(report.format_text())


def cmd_eval(flat: dict, out_dir: Path, seed: int) -> None:
    consumed: set[str] = set()
    ckpt = take(flat, "checkpoint", consumed, required=True)
    dataset = take(flat, "dataset", consumed, required=True)
    reject_unknown(flat, consumed)
    model = load_checkpoint(ckpt)
    records, _, images = load_dataset(dataset)
    report = evaluate_model(model, records, images, full=True)
    report.params = model.param_count()
    report.flops = model.flops(records[0].height, records[0].width)
    (out_dir / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out_dir / "metrics.txt").write_text(report.format_text() + "\n")
    print(report.format_text())


def cmd_rf_report(flat: dict, out_dir: Path, seed: int) -> None:
    consumed: set[str] = set()
    rates = _coerce("rf.rates", take(flat, "rf.rates", consumed, default=(1, 2, 5)), (1, 2, 5))
    kernel = int(take(flat, "rf.kernel", consumed, default=3))
    strides_raw = take(flat, "rf.strides", consumed)
    strides = _coerce("rf.strides", strides_raw, (1,)) if strides_raw is not None else None
    reject_unknown(flat, consumed)
    report = rf_report_dict(DilationSchedule(tuple(rates), kernel), strides)
    text = format_rf_report(report)
    (out_dir / "rf_report.json").write_text(json.dumps(report, indent=2) + "\n")
    (out_dir / "rf_report.txt").write_text(text + "\n")
    print(text)


def cmd_assign_debug(flat: dict, out_dir: Path, seed: int) -> None:
    consumed: set[str] = set()
    dataset = take(flat, "dataset", consumed, required=True)
    index = int(take(flat, "index", consumed, default=0))
    acfg = build_from_flat(AssignerConfig, "assign", flat, consumed)
    model = _load_model(flat, consumed, seed)
    reject_unknown(flat, consumed)

    records, _, images = load_dataset(dataset)
    if not 0 <= index < len(records):
        raise DataError(f"image index {index} outside dataset of {len(records)}")
    rec, image = records[index], images[index]
    h, w = rec.height, rec.width
    with T.no_grad():
        preds = model(Tensor(image[None]), training=False)
        from .network import decode_boxes_np, flatten_level_maps

        cls = flatten_level_maps(preds.cls_logits).data[0]
        offs = flatten_level_maps(preds.box_offsets).data[0]
    priors = prior_points(model.cfg, h, w)
    boxes = decode_boxes_np(offs, prior_arrays(model.cfg, h, w))
    probs = 1.0 / (1.0 + np.exp(-cls))
    gt_boxes = np.stack([inst.box for inst in rec.instances])
    gt_labels = np.array([inst.category for inst in rec.instances])
    cost = assemble_cost_matrix(priors, boxes, probs, gt_boxes, gt_labels, acfg)
    result = assign(cost, acfg)
    text = format_assignment_debug(priors, cost, result, acfg)
    (out_dir / "assign_debug.tsv").write_text(text + "\n")
    print(text)


def cmd_bench(flat: dict, out_dir: Path, seed: int) -> None:
    consumed: set[str] = set()
    size = int(take(flat, "size", consumed, default=400))
    iterations = int(take(flat, "iterations", consumed, default=30))
    warmup = int(take(flat, "warmup", consumed, default=5))
    model = _load_model(flat, consumed, seed)
    reject_unknown(flat, consumed)
    if size % 32:
        raise ConfigError("bench size must be divisible by 32")
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 1, (1, 3, size, size)).astype(np.float32)

    def step():
        with T.no_grad():
            preds = model(Tensor(image), training=False)
        return decode_detections(preds, model.cfg, (size, size))

    stats = benchmark_latency(step, iterations=iterations, warmup=warmup)
    stats["image_size"] = size
    stats["params"] = model.param_count()
    stats["flops"] = model.flops(size, size)
    text = format_latency_report(stats) + (
        f"\nimage_size\t{size}\nparams\t{stats['params']}\nflops\t{stats['flops']}"
    )
    (out_dir / "bench_report.tsv").write_text(text + "\n")
    print(text)


def cmd_activations(flat: dict, out_dir: Path, seed: int) -> None:
    consumed: set[str] = set()
    image_path = take(flat, "image", consumed, required=True)
    model = _load_model(flat, consumed, seed)
    reject_unknown(flat, consumed)
    image = load_image_chw(image_path)
    paths = dump_activations(model, Tensor(image[None]), out_dir)
    for p in paths:
        print(p)


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "rf-report": cmd_rf_report,
    "assign-debug": cmd_assign_debug,
    "bench": cmd_bench,
    "activations": cmd_activations,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glottisnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat dotted-key config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory (default runs/<command>)")
        p.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        flat: dict[str, object] = {}
        if args.config:
            path = Path(args.config)
            if not path.exists():
                raise DataError(f"config file not found: {path}")
            flat.update(parse_config_text(path.read_text(), str(path)))
        for pair in args.set:
            if "=" not in pair:
                raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
            key, value = pair.split("=", 1)
            flat[key.strip()] = _parse_value(value.strip())
        out_dir = Path(args.out) if args.out else Path("runs") / args.command
        out_dir.mkdir(parents=True, exist_ok=True)
        echo_effective_config(out_dir, flat, args.seed)
        _COMMANDS[args.command](flat, out_dir, args.seed)
        return 0
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return 4
    except GlottisNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
