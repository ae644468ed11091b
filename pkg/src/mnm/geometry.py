"""Axis-aligned box algebra: overlap measures, the center-hit test, and the
delta parameterization used to refine boxes between cascade stages.

Scalar functions take :class:`BBox` values; the ``*_matrix`` variants work on
``(n, 4)`` arrays of ``x1, y1, x2, y2`` rows, and the ``*_tensor`` variants are
differentiable through :mod:`mnm.numerics`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, clip, exp, maximum, minimum, stack
from .numerics import tensor as T

# Cascade deltas are scaled like the base architecture's box coder.
DELTA_WEIGHTS = (2.0, 2.0, 1.0, 1.0)
MAX_LOG_SCALE = 4.0


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}")

    @classmethod
    def from_array(cls, arr) -> "BBox":
        return cls(*(float(v) for v in arr))

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def inside(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


def _intersection(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return max(w, 0.0) * max(h, 0.0)


def iou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    return inter / (a.area + b.area - inter)


def giou(a: BBox, b: BBox) -> float:
    inter = _intersection(a, b)
    union = a.area + b.area - inter
    enclosing = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclosing - union) / enclosing


def center_hit(pred: BBox, gt: BBox) -> bool:
    """True when the center of ``pred`` lies in ``gt``, boundary included."""
    cx, cy = pred.center
    return gt.x1 <= cx <= gt.x2 and gt.y1 <= cy <= gt.y2


def l1_normalized(a: BBox, b: BBox, width: float, height: float) -> float:
    scale = np.array([width, height, width, height])
    return float(np.abs((a.to_array() - b.to_array()) / scale).sum())


def encode_delta(anchor: BBox, target: BBox, weights=DELTA_WEIGHTS) -> np.ndarray:
    wx, wy, ww, wh = weights
    ax, ay = anchor.center
    tx, ty = target.center
    return np.array([
        wx * (tx - ax) / anchor.width,
        wy * (ty - ay) / anchor.height,
        ww * math.log(target.width / anchor.width),
        wh * math.log(target.height / anchor.height),
    ])


def apply_delta(anchor: BBox, delta, weights=DELTA_WEIGHTS) -> BBox:
    return BBox.from_array(apply_delta_array(anchor.to_array()[None], np.asarray(delta, float)[None], weights)[0])


# -- vectorized numpy ------------------------------------------------------------


def areas(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(n, m) IoU between rows of ``a`` and rows of ``b``."""
    a = np.asarray(a, float).reshape(-1, 4)
    b = np.asarray(b, float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    return inter / union


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, float).reshape(-1, 4)
    b = np.asarray(b, float).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclosing = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclosing - union) / enclosing


def center_hit_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(n, m) boolean: center of pred row i inside gt row j (inclusive)."""
    pred = np.asarray(pred, float).reshape(-1, 4)
    gt = np.asarray(gt, float).reshape(-1, 4)
    cx = 0.5 * (pred[:, 0] + pred[:, 2])[:, None]
    cy = 0.5 * (pred[:, 1] + pred[:, 3])[:, None]
    return (gt[None, :, 0] <= cx) & (cx <= gt[None, :, 2]) & (gt[None, :, 1] <= cy) & (cy <= gt[None, :, 3])


def l1_matrix(a: np.ndarray, b: np.ndarray, width: float, height: float) -> np.ndarray:
    scale = np.array([width, height, width, height])
    a = np.asarray(a, float).reshape(-1, 4) / scale
    b = np.asarray(b, float).reshape(-1, 4) / scale
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def encode_delta_array(anchors: np.ndarray, targets: np.ndarray, weights=DELTA_WEIGHTS) -> np.ndarray:
    wx, wy, ww, wh = weights
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    tw = targets[..., 2] - targets[..., 0]
    th = targets[..., 3] - targets[..., 1]
    tx = targets[..., 0] + 0.5 * tw
    ty = targets[..., 1] + 0.5 * th
    return np.stack([wx * (tx - ax) / aw, wy * (ty - ay) / ah, ww * np.log(tw / aw), wh * np.log(th / ah)], axis=-1)


def apply_delta_array(anchors: np.ndarray, deltas: np.ndarray, weights=DELTA_WEIGHTS) -> np.ndarray:
    wx, wy, ww, wh = weights
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    ax = anchors[..., 0] + 0.5 * aw
    ay = anchors[..., 1] + 0.5 * ah
    dw = np.clip(deltas[..., 2] / ww, -MAX_LOG_SCALE, MAX_LOG_SCALE)
    dh = np.clip(deltas[..., 3] / wh, -MAX_LOG_SCALE, MAX_LOG_SCALE)
    cx = ax + deltas[..., 0] / wx * aw
    cy = ay + deltas[..., 1] / wy * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def clip_boxes(boxes: np.ndarray, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    """Clip to the image and enforce a minimum extent so every row stays a valid box."""
    out = np.array(boxes, dtype=float, copy=True)
    limits = (width, height)
    for axis in (0, 1):
        lim = limits[axis]
        lo = np.clip(out[..., axis], 0.0, lim - min_size)
        hi = np.clip(out[..., axis + 2], 0.0, lim)
        hi = np.maximum(hi, lo + min_size)
        out[..., axis] = lo
        out[..., axis + 2] = hi
    return out


# -- differentiable -----------------------------------------------------------


def apply_delta_tensor(anchors: Tensor, deltas: Tensor, weights=DELTA_WEIGHTS) -> Tensor:
    """Differentiable :func:`apply_delta_array` for ``(…, 4)`` anchors and deltas."""
    wx, wy, ww, wh = weights
    x1, y1, x2, y2 = (anchors[..., i] for i in range(4))
    dx, dy, dw, dh = (deltas[..., i] for i in range(4))
    aw = x2 - x1
    ah = y2 - y1
    cx = x1 + aw * 0.5 + dx * (1.0 / wx) * aw
    cy = y1 + ah * 0.5 + dy * (1.0 / wy) * ah
    w = aw * exp(clip(dw * (1.0 / ww), -MAX_LOG_SCALE, MAX_LOG_SCALE))
    h = ah * exp(clip(dh * (1.0 / wh), -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return stack([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5], axis=-1)


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted (M, 4) boxes and fixed (M, 4) targets."""
    tgt = Tensor(np.asarray(target, float).reshape(pred.shape))
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    tx1, ty1, tx2, ty2 = (tgt[:, i] for i in range(4))
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = clip(minimum(px2, tx2) - maximum(px1, tx1), 0.0, None)
    ih = clip(minimum(py2, ty2) - maximum(py1, ty1), 0.0, None)
    inter = iw * ih
    union = area_p + area_t - inter
    ew = maximum(px2, tx2) - minimum(px1, tx1)
    eh = maximum(py2, ty2) - minimum(py1, ty1)
    enclosing = ew * eh
    return inter / union - (enclosing - union) / enclosing


def l1_tensor(pred: Tensor, target: np.ndarray, width: float, height: float) -> Tensor:
    """Row-wise sum of |pred - target| over coordinates normalized by image size."""
    scale = np.array([width, height, width, height])
    diff = pred * Tensor(np.broadcast_to(1.0 / scale, pred.shape).copy()) - Tensor(np.asarray(target, float) / scale)
    return T.abs_(diff).sum(axis=-1)


__all__ = [
    "BBox",
    "iou",
    "giou",
    "center_hit",
    "encode_delta",
    "apply_delta",
    "iou_matrix",
    "giou_matrix",
    "center_hit_matrix",
    "l1_matrix",
    "encode_delta_array",
    "apply_delta_array",
    "clip_boxes",
    "apply_delta_tensor",
    "giou_tensor",
    "l1_tensor",
]
