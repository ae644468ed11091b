"""One refinement stage of the cascade and its building blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import geometry
from ..numerics import (
    LayerNorm,
    Linear,
    Module,
    ResidualAttention,
    Tensor,
    concat,
    dropout,
    relu,
    reshape,
    softplus,
)
from .config import ModelConfig
from .roi import roi_align


class DynamicConv(Module):
    """Proposal-conditioned two-layer interaction with RoI features.

    Each proposal feature is mapped to the weights of a D -> D/r and a
    D/r -> D layer. The RoI features pass through both, are flattened and
    projected back to D.
    """

    def __init__(self, dim: int, dynamic_dim: int, roi_size: int, rng: np.random.Generator):
        self.dim = dim
        self.dynamic_dim = dynamic_dim
        self.param_gen = Linear(dim, 2 * dim * dynamic_dim, rng)
        self.norm1 = LayerNorm(dynamic_dim)
        self.norm2 = LayerNorm(dim)
        self.out = Linear(roi_size * roi_size * dim, dim, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, pro_features: Tensor, roi_features: Tensor) -> Tensor:
        """pro_features (…, D), roi_features (…, S*S, D) -> (…, D)."""
        lead = pro_features.shape[:-1]
        d, r = self.dim, self.dynamic_dim
        s2 = roi_features.shape[-2]
        params = self.param_gen(pro_features)
        params = reshape(params, (-1, 2 * d * r))
        w1 = reshape(params[:, : d * r], (-1, d, r))
        w2 = reshape(params[:, d * r:], (-1, r, d))
        x = reshape(roi_features, (-1, s2, d))
        x = relu(self.norm1(x @ w1))
        x = relu(self.norm2(x @ w2))
        x = reshape(x, (-1, s2 * d))
        x = relu(self.norm3(self.out(x)))
        return reshape(x, (*lead, d))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class Tower(Module):
    """Linear (no bias) -> LayerNorm -> ReLU."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.fc = Linear(dim, dim, rng, bias=False)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.norm(self.fc(x)))


class DualClassifier(Module):
    """Objectness logit o and malignancy logit m = o - softplus(W h + b).

    Since softplus > 0, m < o for every proposal: a high malignancy logit
    needs a high objectness logit.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dual: bool = True, prior: float = 0.01):
        self.objectness = Linear(dim, 1, rng)
        self.objectness.bias.data[:] = -np.log((1.0 - prior) / prior)
        self.malignancy = Linear(dim, 1, rng) if dual else None

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        lead = h.shape[:-1]
        o = reshape(self.objectness(h), lead)
        if self.malignancy is None:
            return o, o
        m = o - softplus(reshape(self.malignancy(h), lead))
        return o, m


def dual_classify(head: DualClassifier, h: Tensor) -> tuple[Tensor, Tensor]:
    return head(h)


class CrossViewAttention(ResidualAttention):
    """Shared-parameter attention between the CC and MLO proposal sets.

    h_cc' = LN(h_cc + Dropout(MHA(h_cc, h_mlo, h_mlo))) and symmetrically.
    """

    def __call__(self, h_cc: Tensor, h_mlo: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        if h_cc.shape != h_mlo.shape:
            raise ValueError(f"view feature shapes differ: {h_cc.shape} vs {h_mlo.shape}")
        return super().__call__(h_cc, h_mlo, rng), super().__call__(h_mlo, h_cc, rng)


@dataclass
class HeadOutput:
    """Per-stage outputs for a batch of images, shaped (B, N, …)."""

    boxes: Tensor              # predicted boxes, differentiable, unclipped
    boxes_clipped: np.ndarray  # valid boxes inside the image, used downstream
    objectness: Tensor
    malignancy: Tensor
    features: Tensor


class CascadeStage(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.dim
        self.cfg = cfg
        self.self_attn = ResidualAttention(d, cfg.heads, rng, cfg.dropout)
        self.cross_attn = CrossViewAttention(d, cfg.heads, rng, cfg.dropout) if cfg.multi_view else None
        self.dynamic = DynamicConv(d, cfg.dynamic_dim, cfg.roi_size, rng)
        self.norm_dyn = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng)
        self.norm_ffn = LayerNorm(d)
        self.cls_tower = Tower(d, rng)
        self.reg_tower = Tower(d, rng)
        self.classifier = DualClassifier(d, rng, dual=cfg.dual_heads)
        self.regressor = Linear(d, 4, rng)
        self.regressor.weight.data *= 0.1

    def __call__(self, h: Tensor, anchors: Tensor, features: Tensor, stride: float,
                 n_breasts: int, rng=None, crop_boxes: np.ndarray | None = None) -> HeadOutput:
        """``h`` (2B, N, D) with the B CC images first, then the B MLO images.

        RoIs are cropped at the clipped anchors unless ``crop_boxes`` is given.
        """
        p = self.cfg.dropout if self.training else 0.0
        h = self.self_attn(h, h, rng)
        if self.cross_attn is not None:
            cc, mlo = self.cross_attn(h[:n_breasts], h[n_breasts:], rng)
            h = concat([cc, mlo], axis=0)
        img_w = features.shape[2] * stride
        img_h = features.shape[1] * stride
        source = anchors.data if crop_boxes is None else crop_boxes
        boxes_np = geometry.clip_boxes(source, img_w, img_h)
        roi = roi_align(features, boxes_np, self.cfg.roi_size, stride)
        h = self.norm_dyn(h + dropout(self.dynamic(h, roi), p, rng))
        h = self.norm_ffn(h + dropout(self.ffn(h), p, rng))
        o, m = self.classifier(self.cls_tower(h))
        deltas = self.regressor(self.reg_tower(h))
        boxes = geometry.apply_delta_tensor(anchors, deltas)
        return HeadOutput(
            boxes=boxes,
            boxes_clipped=geometry.clip_boxes(boxes.data, img_w, img_h),
            objectness=o,
            malignancy=m,
            features=h,
        )
