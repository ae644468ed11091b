from __future__ import annotations

import math

import numpy as np

from ..numerics import Module, Parameter, Tensor, conv2d, layer_norm, relu
from .config import ModelConfig


class ConvBlock(Module):
    """3x3 stride-2 convolution, per-image normalization, ReLU.

    The normalization runs over the whole (H, W, C) map of each image.
    Normalizing each pixel over its channels alone would discard local
    amplitude, and with a single input channel that is the lesion contrast.
    """

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        fan_in = 9 * cin
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(3, 3, cin, cout)))
        self.bias = Parameter(np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.weight, self.bias, stride=2, padding=1)
        flat = layer_norm(y.reshape(y.shape[0], -1))
        return relu(flat.reshape(y.shape))


class Backbone(Module):
    """Three strided blocks: (B, H, W) images -> (B, H/8, W/8, D) features."""

    stride = 8

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c1, c2 = cfg.backbone_channels
        self.blocks = [ConvBlock(1, c1, rng), ConvBlock(c1, c2, rng), ConvBlock(c2, cfg.dim, rng)]

    def __call__(self, images) -> Tensor:
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[-2] % 8 or arr.shape[-1] % 8:
            raise ValueError(f"image dimensions {arr.shape[-2:]} are not divisible by 8")
        x = Tensor(arr[..., None])
        for block in self.blocks:
            x = block(x)
        return x
