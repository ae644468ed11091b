"""Parameter containers and the small set of layers the detector is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-registered tree of parameters and child modules."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=p.data.dtype)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.copy()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, din, dout, (din, dout)))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Multi-head attention with its own Q/K/V and output projections.

    Inputs are (…, n, D) queries and (…, m, D) keys/values with matching
    leading axes. Each head works on D/heads features scaled by 1/sqrt(D/heads).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads <= 0 or dim % heads:
            raise ValueError(f"feature dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        if query.shape[-1] != key.shape[-1] or key.shape[:-1] != value.shape[:-1]:
            raise ValueError(f"attention shapes {query.shape}, {key.shape}, {value.shape}")
        q = F.split_heads(self.q_proj(query), self.heads)
        k = F.split_heads(self.k_proj(key), self.heads)
        v = F.split_heads(self.v_proj(value), self.heads)
        return self.out_proj(F.merge_heads(F.scaled_dot_product_attention(q, k, v)))


class ResidualAttention(Module):
    """LayerNorm(x + Dropout(MHA(x, ctx, ctx)))."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.1):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm = LayerNorm(dim)
        self.dropout = dropout

    def __call__(self, x: Tensor, context: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        update = self.attn(x, context, context)
        return self.norm(x + F.dropout(update, self.dropout if self.training else 0.0, rng))
