"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, grad

DEFAULT_STEP = 1e-5
# Central differences at DEFAULT_STEP on an O(10) loss carry ~1e-9 of rounding;
# tensors whose gradient is below this floor are compared absolutely.
DEFAULT_FLOOR = 1e-5


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. every entry of ``param``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(fn().data)
        flat[i] = orig - step
        minus = float(fn().data)
        flat[i] = orig
        g[i] = (plus - minus) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> float:
    """Tensor-wise error: max |a - n| over max(max |a|, max |n|, floor).

    Measured against the largest entry of the tensor, so entries that are
    zero up to finite-difference rounding do not dominate.
    """
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    step: float = DEFAULT_STEP, floor: float = DEFAULT_FLOOR) -> list[float]:
    """Relative error per parameter between backprop and central differences."""
    analytic = grad(fn(), params)
    return [
        relative_error(a, numerical_gradient(fn, p, step), floor)
        for a, p in zip(analytic, params)
    ]
