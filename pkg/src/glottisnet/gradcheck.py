"""Central finite-difference gradient verification.

Used by the test suite to check every differentiable op and loss at float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def finite_difference_grads(
    fn: Callable[..., Tensor], tensors: Sequence[Tensor], h: float = 1e-5
) -> list[np.ndarray]:
    """Central differences of a scalar-valued fn w.r.t. each input tensor."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn(*tensors).item()
            flat[i] = orig - h
            f_minus = fn(*tensors).item()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(
    fn: Callable[..., Tensor], tensors: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max elementwise relative error between tape and finite-difference grads.

    The denominator is floored at 1e-8 so near-zero gradients compare on an
    absolute scale. All inputs should be float64.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks must run at float64")
        t.zero_grad()
    out = fn(*tensors)
    out.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = finite_difference_grads(fn, tensors, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
