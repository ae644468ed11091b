"""Bilinear RoI cropping as one sparse interpolation matrix per call."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..numerics import Tensor


def _axis_samples(lo: np.ndarray, hi: np.ndarray, size: int, extent: int):
    """Integer neighbours and weights for ``size`` cell-centre samples on [lo, hi]."""
    t = (np.arange(size) + 0.5) / size
    pos = lo[..., None] + (hi - lo)[..., None] * t - 0.5
    pos = np.clip(pos, 0.0, extent - 1)
    i0 = np.minimum(np.floor(pos), max(extent - 2, 0)).astype(np.int64)
    i1 = np.minimum(i0 + 1, extent - 1)
    frac = pos - i0
    return i0, i1, frac


def interpolation_matrix(boxes: np.ndarray, height: int, width: int, size: int) -> sp.csr_matrix:
    """Rows: (batch, box, sy, sx) samples; columns: (batch, y, x) feature cells.

    ``boxes`` is (B, N, 4) in feature-map coordinates, where cell (i, j)
    covers [j, j+1) x [i, i+1) and its value sits at the cell centre.
    """
    b, n, _ = boxes.shape
    y0, y1, fy = _axis_samples(boxes[..., 1], boxes[..., 3], size, height)  # (B, N, S)
    x0, x1, fx = _axis_samples(boxes[..., 0], boxes[..., 2], size, width)
    base = (np.arange(b) * height * width)[:, None, None, None]
    rows = np.arange(b * n * size * size).reshape(b, n, size, size)
    cols, vals = [], []
    for yy, wy in ((y0, 1.0 - fy), (y1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x1, fx)):
            cols.append(base + yy[..., :, None] * width + xx[..., None, :])
            vals.append(wy[..., :, None] * wx[..., None, :])
    shape = (b * n * size * size, b * height * width)
    r = np.broadcast_to(rows, cols[0].shape)
    return sp.csr_matrix(
        (np.concatenate([v.ravel() for v in vals]),
         (np.tile(r.ravel(), 4), np.concatenate([c.ravel() for c in cols]))),
        shape=shape,
    )


def roi_align(features: Tensor, boxes: np.ndarray, size: int, stride: float = 1.0) -> Tensor:
    """Crop (B, N, size*size, D) bilinear samples from (B, H, W, D) features.

    ``boxes`` (B, N, 4) are image coordinates; dividing by ``stride`` maps them
    onto the feature grid. Differentiable w.r.t. ``features`` only.
    """
    bsz, h, w, d = features.shape
    boxes = np.asarray(boxes, dtype=float)
    if boxes.ndim == 2:
        boxes = boxes[None]
    n = boxes.shape[1]
    mat = interpolation_matrix(boxes / stride, h, w, size)
    flat = features.data.reshape(bsz * h * w, d)
    out = (mat @ flat).reshape(bsz, n, size * size, d)

    def backward(g):
        return ((mat.T @ g.reshape(-1, d)).reshape(features.shape),)

    return Tensor.from_op(out, (features,), backward)
