"""Fused neural-network primitives with hand-written gradients."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, as_tensor, matmul, reshape, transpose


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W + b over the last axis of ``x``; W is (Din, Dout)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError("linear bias", weight.shape, bias.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, weight.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", x.shape, p.shape)
    # row reductions as matrix-vector products: much faster than short-axis means
    x2 = x.data.reshape(-1, d)
    avg = np.full(d, 1.0 / d)
    centered = x2 - (x2 @ avg)[:, None]
    inv_std = 1.0 / np.sqrt((centered * centered) @ avg + eps)[:, None]
    xhat = centered * inv_std
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, d)
        gxhat = g2 * gain.data if gain is not None else g2
        gx = inv_std * (gxhat - (gxhat @ avg)[:, None] - xhat * ((gxhat * xhat) @ avg)[:, None])
        grads = [gx.reshape(x.shape)]
        if gain is not None:
            grads.append((g2 * xhat).sum(axis=0))
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = tuple(t for t in (x, gain, bias) if t is not None)
    return Tensor.from_op(out, parents, backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``rate`` is 0 or no random source is given."""
    if rate <= 0.0 or rng is None:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes of (…, n, d) inputs."""
    d = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, axes))
    weights = softmax(scores * (1.0 / math.sqrt(d)), axis=-1)
    return matmul(weights, v)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(…, n, D) -> (…, heads, n, D/heads)."""
    *lead, n, d = x.shape
    y = reshape(x, (*lead, n, heads, d // heads))
    nl = len(lead)
    return transpose(y, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def merge_heads(x: Tensor) -> Tensor:
    """(…, heads, n, dh) -> (…, n, heads*dh)."""
    *lead, h, n, dh = x.shape
    nl = len(lead)
    y = transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return reshape(y, (*lead, n, h * dh))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on channels-last input.

    x is (B, H, W, Cin); weight is (k, k, Cin, Cout). Implemented as a single
    matrix product over extracted patches.
    """
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    k = weight.shape[0]
    b, h, w, cin = x.shape
    cout = weight.shape[3]
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    windows = as_strided(
        xp,
        shape=(b, ho, wo, k, k, cin),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    cols = windows.reshape(b * ho * wo, k * k * cin)
    w2 = weight.data.reshape(k * k * cin, cout)
    out = cols @ w2
    if bias is not None:
        out += bias.data
    out = out.reshape(b, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        grads = []
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(b, ho, wo, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            grads.append(gxp[:, padding:padding + h, padding:padding + w, :])
        else:
            grads.append(None)
        grads.append((cols.T @ g2).reshape(weight.shape))
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, backward)


def binary_cross_entropy(prob: Tensor, target, eps: float = 1e-12) -> Tensor:
    """Elementwise -[t log p + (1-t) log(1-p)] with p clamped into [eps, 1-eps]."""
    t = np.asarray(target, dtype=prob.data.dtype)
    if t.shape != prob.shape:
        raise ShapeError("binary_cross_entropy", prob.shape, t.shape)
    p = np.clip(prob.data, eps, 1.0 - eps)
    out = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    inside = p == prob.data

    def backward(gout):
        return (gout * inside * (-(t / p) + (1.0 - t) / (1.0 - p)),)

    return Tensor.from_op(out, (prob,), backward)


def constant(x) -> Tensor:
    return as_tensor(x)
