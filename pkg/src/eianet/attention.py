"""Spatial self-attention over a convolutional feature map.

Queries and keys are 1x1 projections into ``C_r = max(1, C // 8)`` channels,
values keep all ``C`` channels, and the attended map is added back to the
input through a learnable gate ``gamma`` that starts at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, conv2d, matmul, softmax


def reduced_channels(channels: int) -> int:
    return max(1, channels // 8)


@dataclass
class AttentionLayer:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    gamma: Tensor

    @property
    def channels(self) -> int:
        return self.wv.shape[0]

    @property
    def key_dim(self) -> int:
        return self.wk.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "gamma": self.gamma}


def init_attention(channels: int, rng: np.random.Generator, gamma: float = 0.0) -> AttentionLayer:
    """Uniform fan-in initialisation of the three projections; ``gamma`` gate as given."""
    cr = reduced_channels(channels)
    bound = 1.0 / math.sqrt(channels)

    def kernel(out_ch):
        return Tensor(rng.uniform(-bound, bound, (out_ch, channels, 1, 1)), requires_grad=True)

    wq, wk, wv = kernel(cr), kernel(cr), kernel(channels)
    return AttentionLayer(wq=wq, wk=wk, wv=wv, gamma=Tensor(gamma, requires_grad=True))


def _projections(layer: AttentionLayer, x: Tensor):
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise DimensionError(
            f"attention layer expects B x {layer.channels} x H x W input, got {x.shape}"
        )
    b, c, h, w = x.shape
    n = h * w
    cr = layer.key_dim
    q = conv2d(x, layer.wq).reshape(b, cr, n).transpose(0, 2, 1)  # B x N x C_r
    k = conv2d(x, layer.wk).reshape(b, cr, n)  # B x C_r x N
    v = conv2d(x, layer.wv).reshape(b, c, n)  # B x C x N
    return q, k, v


def attention_map(layer: AttentionLayer, x: Tensor) -> Tensor:
    """``B x N x N`` weights; row ``i`` is the distribution of query ``i`` over keys."""
    q, k, _ = _projections(layer, x)
    return softmax(matmul(q, k) * (1.0 / math.sqrt(layer.key_dim)), axis=-1)


def attention_forward(layer: AttentionLayer, x: Tensor) -> Tensor:
    """Return ``x + gamma * attended`` with the same ``B x C x H x W`` shape."""
    q, k, v = _projections(layer, x)
    weights = softmax(matmul(q, k) * (1.0 / math.sqrt(layer.key_dim)), axis=-1)
    attended = matmul(v, weights.transpose(0, 2, 1)).reshape(x.shape)
    return x + layer.gamma * attended
