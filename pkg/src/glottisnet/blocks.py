"""Network building blocks and receptive-field analytics.

The central block (LightSRM) pairs a cascade of dilated convolutions (large
receptive field at unchanged parameter cost) with a 5x5 depthwise-separable
shortcut, fuses both through channel attention and a 1x1 projection. Two
analytic tools accompany it: exact receptive-field computation for a conv
cascade and a gap check that rejects dilation schedules whose sampling grids
leave holes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

# -- receptive-field analytics -------------------------------------------------


@dataclass(frozen=True)
class LayerRF:
    kernel: int
    stride: int
    dilation: int
    effective_kernel: int
    receptive_field: int


@dataclass(frozen=True)
class ReceptiveFieldReport:
    layers: tuple[LayerRF, ...]

    @property
    def final(self) -> int:
        return self.layers[-1].receptive_field


def compute_receptive_field(layers: Sequence[tuple[int, int, int]]) -> ReceptiveFieldReport:
    """Receptive-field edge length after each layer of a (k, stride, dilation) cascade.

    R_0 = 1 and each layer adds (effective_kernel - 1) times the product of
    all earlier strides, where effective_kernel = dilation * (k - 1) + 1.
    """
    if not layers:
        raise ConfigError("receptive field needs at least one layer")
    rows = []
    r = 1
    jump = 1
    for k, stride, dilation in layers:
        k = int(k)
        if k < 1 or k % 2 == 0:
            raise ConfigError(f"kernel size must be odd and positive, got {k}")
        if stride < 1 or dilation < 1:
            raise ConfigError("stride and dilation must be positive")
        k_eff = dilation * (k - 1) + 1
        r = r + (k_eff - 1) * jump
        rows.append(LayerRF(k, int(stride), int(dilation), k_eff, r))
        jump *= int(stride)
    return ReceptiveFieldReport(tuple(rows))


@dataclass(frozen=True)
class DilationSchedule:
    rates: tuple[int, ...]
    kernel: int = 3

    def __post_init__(self):
        if not self.rates or any(r < 1 for r in self.rates):
            raise ConfigError("dilation rates must be a non-empty sequence of positive ints")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be odd and positive")


@dataclass(frozen=True)
class ScheduleCheck:
    passed: bool
    # Max inter-tap distances in the order the top-down recurrence produces
    # them: (D_n, ..., D_1). The accept test looks at layer 2, i.e. index -2.
    d_values: tuple[int, ...]


def validate_dilation_schedule(schedule: DilationSchedule) -> ScheduleCheck:
    """Check a dilation cascade for sampling holes.

    Computes D_i = max(D_{i+1} - 2 r_i, 2 r_i - D_{i+1}, r_i) top-down with
    D_n = r_n; the schedule passes when the second layer's maximum gap fits
    inside one kernel (single-layer schedules pass when r_1 <= k).
    """
    rates = schedule.rates
    k = schedule.kernel
    n = len(rates)
    d = rates[-1]
    d_values = [d]
    for r in reversed(rates[:-1]):
        d = max(d - 2 * r, 2 * r - d, r)
        d_values.append(d)
    if n == 1:
        passed = rates[0] <= k
    else:
        passed = d_values[1] <= k  # D_2: second layer counted bottom-up
    return ScheduleCheck(passed, tuple(d_values))


def rf_report_dict(schedule: DilationSchedule, strides: Sequence[int] | None = None) -> dict:
    """Combined Eq-style report for a uniform-kernel dilated cascade."""
    strides = list(strides) if strides is not None else [1] * len(schedule.rates)
    if len(strides) != len(schedule.rates):
        raise ConfigError("strides must match the number of dilation rates")
    rf = compute_receptive_field(
        [(schedule.kernel, s, r) for s, r in zip(strides, schedule.rates)]
    )
    check = validate_dilation_schedule(schedule)
    return {
        "kernel": schedule.kernel,
        "layers": [
            {
                "kernel": row.kernel,
                "stride": row.stride,
                "dilation": row.dilation,
                "effective_kernel": row.effective_kernel,
                "receptive_field": row.receptive_field,
            }
            for row in rf.layers
        ],
        "final_receptive_field": rf.final,
        "gap_values_topdown": list(check.d_values),
        "gap_check": "PASS" if check.passed else "FAIL",
    }


def format_rf_report(report: dict) -> str:
    lines = [
        f"{'layer':>5} {'k':>3} {'r':>3} {'s':>3} {'k_eff':>6} {'RF':>5}",
    ]
    for i, row in enumerate(report["layers"], 1):
        lines.append(
            f"{i:>5} {row['kernel']:>3} {row['dilation']:>3} {row['stride']:>3}"
            f" {row['effective_kernel']:>6} {row['receptive_field']:>5}"
        )
    lines.append(f"final receptive field: {report['final_receptive_field']}")
    lines.append(
        "gap values (top-down): " + ", ".join(str(v) for v in report["gap_values_topdown"])
    )
    lines.append(f"gap check: {report['gap_check']}")
    return "\n".join(lines)


# -- weight helpers --------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
    return Tensor(w, requires_grad=True)


def _apply_act(x: Tensor, act: str | None) -> Tensor:
    if act is None:
        return x
    if act == "silu":
        return T.silu(x)
    if act == "relu":
        return T.relu(x)
    if act == "sigmoid":
        return T.sigmoid(x)
    raise ConfigError(f"unknown activation {act!r}")


class ConvModule:
    """conv + per-channel batch normalization + activation.

    Normalization uses batch statistics while training and frozen running
    statistics at inference; bias defaults to on only when normalization is
    off.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        k: int,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
        groups: int = 1,
        norm: bool = True,
        act: str | None = "silu",
        bias: bool | None = None,
        dtype=np.float32,
    ):
        if in_ch % groups or out_ch % groups:
            raise ConfigError(f"channels ({in_ch}->{out_ch}) not divisible by groups={groups}")
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride = stride
        self.padding = dilation * (k - 1) // 2 if padding is None else padding
        self.dilation = dilation
        self.groups = groups
        self.norm = norm
        self.act = act
        fan_in = (in_ch // groups) * k * k
        self.weight = he_normal(rng, (out_ch, in_ch // groups, k, k), fan_in, dtype)
        use_bias = (not norm) if bias is None else bias
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if use_bias else None
        if norm:
            self.bn_momentum = 0.1
            self.scale = Tensor(np.ones(out_ch, dtype=dtype), requires_grad=True)
            self.shift = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
            self.running_mean = Tensor(np.zeros(out_ch, dtype=np.float64))
            self.running_var = Tensor(np.ones(out_ch, dtype=np.float64))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        out = T.conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
            groups=self.groups,
        )
        if self.norm:
            out = T.batch_norm(
                out,
                self.scale,
                self.shift,
                self.running_mean.data,
                self.running_var.data,
                training=training,
                momentum=self.bn_momentum,
            )
        return _apply_act(out, self.act)

    def named_tensors(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias
        if self.norm:
            yield f"{prefix}.scale", self.scale
            yield f"{prefix}.shift", self.shift
            yield f"{prefix}.running_mean", self.running_mean
            yield f"{prefix}.running_var", self.running_var

    def param_count(self) -> int:
        n = self.weight.size + (self.bias.size if self.bias is not None else 0)
        if self.norm:
            n += self.scale.size + self.shift.size
        return n

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        ho = T.conv_output_size(h, self.k, self.stride, self.padding, self.dilation)
        wo = T.conv_output_size(w, self.k, self.stride, self.padding, self.dilation)
        return ho, wo

    def flops(self, h: int, w: int) -> tuple[int, tuple[int, int]]:
        ho, wo = self.out_size(h, w)
        macs = ho * wo * self.out_ch * (self.in_ch // self.groups) * self.k * self.k
        return 2 * macs, (ho, wo)


class DepthwiseSeparable:
    """k x k depthwise conv followed by a 1x1 pointwise mix (both normalized)."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_ch: int,
        out_ch: int,
        k: int = 3,
        stride: int = 1,
        act: str | None = "silu",
        dtype=np.float32,
    ):
        self.depthwise = ConvModule(
            rng, in_ch, in_ch, k, stride=stride, groups=in_ch, act=act, dtype=dtype
        )
        self.pointwise = ConvModule(rng, in_ch, out_ch, 1, act=act, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.pointwise(self.depthwise(x, training), training)

    def named_tensors(self, prefix: str):
        yield from self.depthwise.named_tensors(f"{prefix}.depthwise")
        yield from self.pointwise.named_tensors(f"{prefix}.pointwise")

    def param_count(self) -> int:
        return self.depthwise.param_count() + self.pointwise.param_count()

    def flops(self, h: int, w: int):
        f1, hw = self.depthwise.flops(h, w)
        f2, hw = self.pointwise.flops(*hw)
        return f1 + f2, hw


#: The spec sheet for the neck's channel-normalization stage.
DWCM = DepthwiseSeparable


class ChannelAttention:
    """Squeeze-excite gate: pooled means -> reduce -> expand -> sigmoid scale."""

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 4, dtype=np.float32):
        hidden = max(1, channels // reduction)
        self.channels = channels
        self.reduce = ConvModule(rng, channels, hidden, 1, norm=False, act="silu", dtype=dtype)
        self.expand = ConvModule(rng, hidden, channels, 1, norm=False, act=None, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.channels:
            raise ConfigError(f"attention expects {self.channels} channels, got {x.shape[1]}")
        s = T.global_avg_pool(x)
        s = self.expand(self.reduce(s, training), training)
        return x * T.sigmoid(s)

    def named_tensors(self, prefix: str):
        yield from self.reduce.named_tensors(f"{prefix}.reduce")
        yield from self.expand.named_tensors(f"{prefix}.expand")

    def param_count(self) -> int:
        return self.reduce.param_count() + self.expand.param_count()

    def flops(self, h: int, w: int):
        # The gate runs once per image on globally pooled 1x1 features; its
        # O(C^2) cost is area-independent and excluded so conv FLOPs scale
        # exactly with output area.
        return 0, (h, w)


class SPPF:
    """Spatial pyramid pooling, fast variant: cascaded equal-kernel max pools.

    1x1 reduce, three stride-1 5x5 pools in series, concat of the four
    branches, 1x1 fuse. Cascading k=5 pools is equivalent to parallel 5/9/13
    windows.
    """

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int, pool_k: int = 5, dtype=np.float32):
        hidden = in_ch // 2
        self.pool_k = pool_k
        self.reduce = ConvModule(rng, in_ch, hidden, 1, dtype=dtype)
        self.fuse = ConvModule(rng, hidden * 4, out_ch, 1, dtype=dtype)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y0 = self.reduce(x, training)
        pad = self.pool_k // 2
        y1 = T.maxpool2d(y0, self.pool_k, 1, pad)
        y2 = T.maxpool2d(y1, self.pool_k, 1, pad)
        y3 = T.maxpool2d(y2, self.pool_k, 1, pad)
        return self.fuse(T.concat_channels(y0, y1, y2, y3), training)

    def named_tensors(self, prefix: str):
        yield from self.reduce.named_tensors(f"{prefix}.reduce")
        yield from self.fuse.named_tensors(f"{prefix}.fuse")

    def param_count(self) -> int:
        return self.reduce.param_count() + self.fuse.param_count()

    def flops(self, h: int, w: int):
        f1, hw = self.reduce.flops(h, w)
        f2, hw = self.fuse.flops(*hw)
        return f1 + f2, hw


@dataclass(frozen=True)
class LightSRMConfig:
    """Declarative shape of one multi-receptive-field block."""

    in_channels: int
    out_channels: int
    dilations: tuple[int, ...] = (1, 2, 5)
    kernel: int = 3
    shortcut_kernel: int = 5
    attention_reduction: int = 4
    with_shortcut: bool = True
    depthwise_shortcut: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.with_shortcut and self.out_channels % 2:
            raise ConfigError("out_channels must be even when the shortcut path is present")
        DilationSchedule(tuple(self.dilations), self.kernel)


class LightSRM:
    """Dilated main path plus depthwise shortcut, fused via channel attention.

    Both paths preserve spatial dims and carry out_channels/2 each before the
    channel concat; dropping the shortcut keeps the half-width main path and
    lets the 1x1 fuse expand, so the reduced variant is strictly smaller.
    """

    def __init__(self, rng: np.random.Generator, cfg: LightSRMConfig, dtype=np.float32):
        self.cfg = cfg
        main_ch = max(1, cfg.out_channels // 2)
        self.main_convs = []
        ch = cfg.in_channels
        for d in cfg.dilations:
            self.main_convs.append(
                ConvModule(rng, ch, main_ch, cfg.kernel, dilation=d, dtype=dtype)
            )
            ch = main_ch
        if cfg.with_shortcut:
            sc_ch = cfg.out_channels - main_ch
            if cfg.depthwise_shortcut:
                self.shortcut = DepthwiseSeparable(
                    rng, cfg.in_channels, sc_ch, k=cfg.shortcut_kernel, dtype=dtype
                )
            else:
                self.shortcut = ConvModule(
                    rng, cfg.in_channels, sc_ch, cfg.shortcut_kernel, dtype=dtype
                )
            merged_ch = cfg.out_channels
        else:
            self.shortcut = None
            merged_ch = main_ch
        self.attention = ChannelAttention(rng, merged_ch, cfg.attention_reduction, dtype=dtype)
        self.fuse = ConvModule(rng, merged_ch, cfg.out_channels, 1, dtype=dtype)

    def main_path(self, x: Tensor, training: bool = False) -> Tensor:
        out = x
        for conv in self.main_convs:
            out = conv(out, training)
        return out

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        main = self.main_path(x, training)
        if self.shortcut is not None:
            merged = T.concat_channels(main, self.shortcut(x, training))
        else:
            merged = main
        return self.fuse(self.attention(merged, training), training)

    def main_path_receptive_field(self) -> ReceptiveFieldReport:
        return compute_receptive_field(
            [(self.cfg.kernel, 1, d) for d in self.cfg.dilations]
        )

    def named_tensors(self, prefix: str):
        for i, conv in enumerate(self.main_convs):
            yield from conv.named_tensors(f"{prefix}.main.{i}")
        if self.shortcut is not None:
            yield from self.shortcut.named_tensors(f"{prefix}.shortcut")
        yield from self.attention.named_tensors(f"{prefix}.attention")
        yield from self.fuse.named_tensors(f"{prefix}.fuse")

    def main_path_param_count(self) -> int:
        return sum(c.param_count() for c in self.main_convs)

    def param_count(self) -> int:
        n = self.main_path_param_count() + self.attention.param_count() + self.fuse.param_count()
        if self.shortcut is not None:
            n += self.shortcut.param_count()
        return n

    def flops(self, h: int, w: int):
        total = 0
        hw = (h, w)
        for conv in self.main_convs:
            f, hw = conv.flops(*hw)
            total += f
        if self.shortcut is not None:
            f, _ = self.shortcut.flops(h, w)
            total += f
        f, _ = self.attention.flops(*hw)
        total += f
        f, hw = self.fuse.flops(*hw)
        total += f
        return total, hw
