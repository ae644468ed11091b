"""Multiple-instance pooling of proposal malignancy into image scores.

Pooling is carried in log-complement form, ``log(1 - score)``, so that the
image and breast cross-entropies stay finite even when scores saturate.
"""

from __future__ import annotations

import math

import numpy as np

from ..numerics import Tensor, max_, reshape, softplus
from ..numerics import tensor as T
from .config import MIL_SCHEMES


def mil_pool(probs, scheme: str = "noisy_or", features=None, gap_head=None) -> float:
    """Image score in [0, 1] from per-proposal malignancy probabilities."""
    p = np.asarray(probs, dtype=float)
    if scheme == "noisy_or":
        return float(1.0 - np.prod(1.0 - p))
    if scheme == "max":
        return float(p.max())
    if scheme == "mean":
        return float(p.mean())
    if scheme == "gap":
        if features is None or gap_head is None:
            raise ValueError("gap pooling needs proposal features and a linear head")
        z = gap_head(Tensor(np.asarray(features, float).mean(axis=0, keepdims=True))).data
        return float(1.0 / (1.0 + np.exp(-z.item())))
    raise ValueError(f"unknown MIL scheme {scheme!r}; expected one of {MIL_SCHEMES}")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    mx = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * e / s,)

    return Tensor.from_op(out, (x,), backward)


def image_log_complement(m: Tensor, features: Tensor, scheme: str, gap_head=None) -> Tensor:
    """log(1 - image score) for (B, N) malignancy logits -> (B,)."""
    if scheme == "noisy_or":
        # prod(1 - sigmoid(m)) = exp(-sum softplus(m))
        return -softplus(m).sum(axis=-1)
    if scheme == "max":
        return -softplus(max_(m, axis=-1))
    if scheme == "mean":
        n = m.shape[-1]
        return logsumexp(-softplus(m), axis=-1) - math.log(n)
    if scheme == "gap":
        if gap_head is None:
            raise ValueError("gap pooling needs a linear head")
        pooled = features.mean(axis=-2)
        return -softplus(reshape(gap_head(pooled), pooled.shape[:-1]))
    raise ValueError(f"unknown MIL scheme {scheme!r}; expected one of {MIL_SCHEMES}")


def breast_log_complement(lq_cc: Tensor, lq_mlo: Tensor) -> Tensor:
    """log(1 - mean(score_cc, score_mlo)) from the two views' log-complements."""
    return logsumexp(T.stack([lq_cc, lq_mlo], axis=-1), axis=-1) - math.log(2.0)


def bce_from_log_complement(lq: Tensor, target) -> Tensor:
    """Cross-entropy of score = 1 - exp(lq) against binary ``target``, elementwise."""
    y = np.asarray(target, dtype=float)
    x = lq.data
    if y.shape != x.shape:
        raise ValueError(f"target shape {y.shape} != {x.shape}")
    positive = y > 0
    with np.errstate(divide="ignore"):
        pos = np.where(positive, -np.log(-np.expm1(x)), 0.0)
        slope = np.where(positive, 1.0 / np.expm1(-x), 0.0)
    out = y * pos - (1.0 - y) * x

    def backward(g):
        return (g * (y * slope - (1.0 - y)),)

    return Tensor.from_op(out, (lq,), backward)
