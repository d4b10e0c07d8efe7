"""Dense tensor engine with tape-based reverse-mode autodiff.

Feature maps are NCHW float32 in the training/inference paths; the
verification suite runs the same ops at float64 against naive-loop and
finite-difference oracles. Every op is pure with respect to its inputs and
records a backward closure only while gradients are enabled and at least one
input requires them. A module-level debug flag adds a NaN/Inf sentinel after
each op.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, GraphError, NumericError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the after-op NaN/Inf sentinel (off in release paths)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / decode paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense numpy-backed tensor that may participate in the gradient tape.

    `data` is always a float32 or float64 ndarray. `grad`, once backward()
    has run, matches `data`'s shape. Tensors produced by ops hold references
    to their parents and a closure computing parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A copy of the underlying values (callers cannot corrupt the graph)."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_const(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_const(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    # -- backward ----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into .grad buffers."""
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar loss tensor")
        if self._grad_fn is None and not self.requires_grad:
            raise GraphError("backward() called on a tensor detached from any recorded graph")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is None or node.grad is None:
                continue
            grads = node._grad_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None:
                    continue
                if parent.requires_grad or parent._grad_fn is not None:
                    parent.grad = g if parent.grad is None else parent.grad + g


def _as_const(value, dtype) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype))


def _result_dtype(*tensors: Tensor):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ConfigError(f"mixed tensor dtypes {dt} vs {t.dtype}; cast explicitly")
    return dt


def _make(out_data: np.ndarray, parents: Sequence[Tensor], grad_fn, op: str) -> Tensor:
    if _debug_checks and not np.isfinite(out_data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._grad_fn = None
    if _grad_enabled and any(p.requires_grad or p._grad_fn is not None for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents) or any(
            p._grad_fn is not None for p in parents
        )
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ops -------------------------------------------------


def _binary(a, b, fwd, bwd_a, bwd_b, op: str) -> Tensor:
    if not isinstance(a, Tensor):
        a = _as_const(a, b.dtype)
    if not isinstance(b, Tensor):
        b = _as_const(b, a.dtype)
    _result_dtype(a, b)
    try:
        out_data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ConfigError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc

    def grad_fn(g):
        ga = _unbroadcast(bwd_a(g, a.data, b.data, out_data), a.shape)
        gb = _unbroadcast(bwd_b(g, a.data, b.data, out_data), b.shape)
        return ga, gb

    return _make(out_data, (a, b), grad_fn, op)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y, o: g, lambda g, x, y, o: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y, o: g, lambda g, x, y, o: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x, "mul")


def div(a, b) -> Tensor:
    return _binary(
        a, b, lambda x, y: x / y, lambda g, x, y, o: g / y, lambda g, x, y, o: -g * x / (y * y), "div"
    )


def maximum(a, b) -> Tensor:
    # Subgradient: ties go to the first argument.
    return _binary(
        a,
        b,
        np.maximum,
        lambda g, x, y, o: g * (x >= y),
        lambda g, x, y, o: g * (x < y),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    return _binary(
        a,
        b,
        np.minimum,
        lambda g, x, y, o: g * (x <= y),
        lambda g, x, y, o: g * (x > y),
        "minimum",
    )


# -- elementwise unary ops ----------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    mask = x.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _make(out_data, (x,), grad_fn, "relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates to the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def grad_fn(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), grad_fn, "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out_data = x.data * s

    def grad_fn(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _make(out_data, (x,), grad_fn, "silu")


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def grad_fn(g):
        return (g / x.data,)

    return _make(out_data, (x,), grad_fn, "log")


def pow_const(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    out_data = x.data**p

    def grad_fn(g):
        return (g * p * x.data ** (p - 1.0),)

    return _make(out_data, (x,), grad_fn, "pow")


def clamp(x: Tensor, lo=None, hi=None, straight_through: bool = False) -> Tensor:
    """Clip to [lo, hi]. With straight_through the gradient ignores the clip."""
    out_data = np.clip(x.data, lo, hi)
    if straight_through:

        def grad_fn(g):
            return (g,)

    else:
        mask = np.ones_like(x.data, dtype=bool)
        if lo is not None:
            mask &= x.data >= lo
        if hi is not None:
            mask &= x.data <= hi

        def grad_fn(g):
            return (g * mask,)

    return _make(out_data, (x,), grad_fn, "clamp")


# -- reductions / shape ops ---------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out_data), (x,), grad_fn, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    out_data = x.data.mean(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.asarray(out_data), (x,), grad_fn, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out_data = x.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def grad_fn(g):
        return (g.reshape(x.shape),)

    return _make(out_data, (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _make(out_data, (x,), grad_fn, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ConfigError("concat requires at least one tensor")
    _result_dtype(*tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis % len(ref)
        ):
            raise ConfigError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        pieces = []
        for i in range(len(sizes)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            pieces.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(pieces)

    return _make(out_data, tensors, grad_fn, "concat")


def concat_channels(*tensors: Tensor) -> Tensor:
    """Concatenate NCHW maps along channels; N, H, W must match."""
    for t in tensors:
        if t.data.ndim != 4:
            raise ConfigError("concat_channels expects rank-4 tensors")
    return concat(tensors, axis=1)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows (axis 0) by integer indices; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ConfigError("take_rows expects a 1-D index array")
    if x.data.shape[0] and (idx.min(initial=0) < 0 or (idx.size and idx.max() >= x.data.shape[0])):
        raise ConfigError("take_rows: index out of range")
    out_data = x.data[idx]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out_data, (x,), grad_fn, "take_rows")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ConfigError("matmul supports 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    _result_dtype(a, b)
    out_data = a.data @ b.data

    def grad_fn(g):
        return (g @ b.data.T, a.data.T @ g)

    return _make(out_data, (a, b), grad_fn, "matmul")


# -- spatial ops --------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _conv_cols(xd: np.ndarray, kh, kw, sh, sw, ph, pw, dh, dw):
    """Padded input plus a strided (N, C, Ho, Wo, kh, kw) window view."""
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kh_eff = dh * (kh - 1) + 1
    kw_eff = dw * (kw - 1) + 1
    win = sliding_window_view(xp, (kh_eff, kw_eff), axis=(2, 3))
    cols = win[:, :, ::sh, ::sw, ::dh, ::dw]
    return xp, cols


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    dilation=1,
    groups: int = 1,
) -> Tensor:
    """2-D convolution over NCHW input; supports stride, dilation and groups.

    The weight layout is (out_channels, in_channels // groups, kh, kw).
    Channel/shape violations raise ConfigError.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigError("conv2d expects rank-4 input and weight")
    _result_dtype(x, weight, *(b for b in (bias,) if b is not None))
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"conv2d: groups={groups} incompatible with C={c}, O={o}")
    if cg != c // groups:
        raise ConfigError(f"conv2d: weight expects {cg * groups} input channels, got {c}")
    if bias is not None and bias.shape != (o,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"conv2d: non-positive output size {ho}x{wo} for input {h}x{w}")

    xd, wd = x.data, weight.data
    xp, cols = _conv_cols(xd, kh, kw, sh, sw, ph, pw, dh, dw)
    depthwise = groups == c and o == c and cg == 1

    if groups == 1:
        mat = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
        out_data = (mat @ wd.reshape(o, -1).T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        out_data = np.ascontiguousarray(out_data)
    elif depthwise:
        out_data = np.zeros((n, c, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out_data += cols[:, :, :, :, i, j] * wd[:, 0, i, j][None, :, None, None]
        mat = None
    else:
        out_data = np.empty((n, o, ho, wo), dtype=xd.dtype)
        og = o // groups
        for g_i in range(groups):
            cs = slice(g_i * cg, (g_i + 1) * cg)
            os_ = slice(g_i * og, (g_i + 1) * og)
            m = np.ascontiguousarray(cols[:, cs].transpose(0, 2, 3, 1, 4, 5)).reshape(
                n * ho * wo, cg * kh * kw
            )
            out_data[:, os_] = (
                (m @ wd[os_].reshape(og, -1).T).reshape(n, ho, wo, og).transpose(0, 3, 1, 2)
            )
        mat = None
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        gxp = np.zeros_like(xp)
        if groups == 1:
            gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
            gw = (gm.T @ mat).reshape(o, c, kh, kw)
            gcols = (gm @ wd.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dh : i * dh + sh * (ho - 1) + 1 : sh,
                        j * dw : j * dw + sw * (wo - 1) + 1 : sw] += gcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
        elif depthwise:
            gw = np.einsum("nchw,nchwij->cij", g, cols)[:, None]
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dh : i * dh + sh * (ho - 1) + 1 : sh,
                        j * dw : j * dw + sw * (wo - 1) + 1 : sw] += (
                        g * wd[:, 0, i, j][None, :, None, None]
                    )
        else:
            gw = np.zeros_like(wd)
            og = o // groups
            for g_i in range(groups):
                cs = slice(g_i * cg, (g_i + 1) * cg)
                os_ = slice(g_i * og, (g_i + 1) * og)
                m = np.ascontiguousarray(cols[:, cs].transpose(0, 2, 3, 1, 4, 5)).reshape(
                    n * ho * wo, cg * kh * kw
                )
                gm = np.ascontiguousarray(g[:, os_].transpose(0, 2, 3, 1)).reshape(n * ho * wo, og)
                gw[os_] = (gm.T @ m).reshape(og, cg, kh, kw)
                gcols = (gm @ wd[os_].reshape(og, -1)).reshape(n, ho, wo, cg, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, cs, i * dh : i * dh + sh * (ho - 1) + 1 : sh,
                            j * dw : j * dw + sw * (wo - 1) + 1 : sw] += gcols[
                            :, :, :, :, i, j
                        ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        if bias is not None:
            return np.ascontiguousarray(gx), gw, gb
        return np.ascontiguousarray(gx), gw

    return _make(out_data, parents, grad_fn, "conv2d")


def depthwise_separable_conv(
    x: Tensor,
    dw_weight: Tensor,
    pw_weight: Tensor,
    dw_bias: Tensor | None = None,
    pw_bias: Tensor | None = None,
    stride=1,
    padding=0,
    dilation=1,
) -> Tensor:
    """Per-channel spatial conv followed by a 1x1 channel mix.

    Exactly conv2d(conv2d(x, depthwise), pointwise); the depthwise stage uses
    groups == channels and the pointwise kernel must be 1x1.
    """
    c = x.shape[1]
    if dw_weight.shape[0] != c or dw_weight.shape[1] != 1:
        raise ConfigError(f"depthwise weight shape {dw_weight.shape} incompatible with C={c}")
    if pw_weight.shape[2:] != (1, 1):
        raise ConfigError(f"pointwise kernel must be 1x1, got {pw_weight.shape[2:]}")
    mid = conv2d(x, dw_weight, dw_bias, stride=stride, padding=padding, dilation=dilation, groups=c)
    return conv2d(mid, pw_weight, pw_bias)


def maxpool2d(x: Tensor, k, stride=None, padding=0) -> Tensor:
    """Max pooling over NCHW; padding uses -inf so padded cells never win."""
    if x.data.ndim != 4:
        raise ConfigError("maxpool2d expects a rank-4 tensor")
    kh, kw = _pair(k)
    sh, sw = _pair(stride if stride is not None else k)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, sh, ph, 1)
    wo = conv_output_size(w, kw, sw, pw, 1)
    if ho <= 0 or wo <= 0:
        raise ConfigError(f"maxpool2d: non-positive output size {ho}x{wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out_data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out_data = np.ascontiguousarray(out_data)

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=False)
        rows = hi * sh + arg // kw
        colsj = wi * sw + arg % kw
        np.add.at(gxp, (ni, ci, rows, colsj), g)
        gx = gxp[:, :, ph : ph + h, pw : pw + w] if (ph or pw) else gxp
        return (np.ascontiguousarray(gx),)

    return _make(out_data, (x,), grad_fn, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, keeping (N, C, 1, 1) shape."""
    if x.data.ndim != 4:
        raise ConfigError("global_avg_pool expects a rank-4 tensor")
    n, c, h, w = x.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _make(out_data, (x,), grad_fn, "global_avg_pool")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.data.ndim != 4:
        raise ConfigError("upsample_nearest expects a rank-4 tensor")
    f = int(factor)
    if f < 1:
        raise ConfigError("upsample_nearest factor must be >= 1")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _make(out_data, (x,), grad_fn, "upsample_nearest")


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch-statistics normalization with learned scale/shift.

    Training mode normalizes by current-batch statistics and updates the
    running buffers in place (the one deliberately stateful op); inference
    uses the frozen running statistics.
    """
    if x.data.ndim != 4:
        raise ConfigError("batch_norm expects a rank-4 tensor")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ConfigError(f"batch_norm: scale/shift must have shape ({c},)")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]

    def grad_fn(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        gxhat = g * scale.data[None, :, None, None]
        if training:
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = (inv_std[None, :, None, None] / m) * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, gscale, gshift

    return _make(out_data, (x, scale, shift), grad_fn, "batch_norm")


# -- fixture I/O ---------------------------------------------------------------

_TENSOR_MAGIC = b"GNTENSR1"


def dump_tensor(t: Tensor, path) -> None:
    """Write magic + four u64 dims + little-endian payload (f32 or f64)."""
    if t.data.ndim > 4:
        raise ConfigError("dump_tensor supports at most rank-4 tensors")
    shape4 = (1,) * (4 - t.data.ndim) + tuple(t.data.shape)
    payload = np.ascontiguousarray(t.data).astype(
        "<f4" if t.data.dtype == np.float32 else "<f8"
    )
    with open(path, "wb") as fh:
        fh.write(_TENSOR_MAGIC)
        fh.write(struct.pack("<4Q", *shape4))
        fh.write(payload.tobytes())


def load_tensor(path) -> Tensor:
    """Read a fixture written by dump_tensor; dtype inferred from payload size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 + 32 or raw[:8] != _TENSOR_MAGIC:
        raise DataError(f"{path}: not a GNTENSR1 tensor file")
    dims = struct.unpack("<4Q", raw[8:40])
    count = int(np.prod(dims))
    payload = raw[40:]
    if len(payload) == 8 * count:
        data = np.frombuffer(payload, dtype="<f8").reshape(dims)
    elif len(payload) == 4 * count:
        data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    else:
        raise DataError(f"{path}: payload size {len(payload)} does not match dims {dims}")
    return Tensor(data.copy())


def tensors_allclose(a: Tensor, b: Tensor, atol: float = 0.0, rtol: float = 0.0) -> bool:
    return a.shape == b.shape and np.allclose(a.data, b.data, atol=atol, rtol=rtol)
