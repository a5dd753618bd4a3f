"""Small convolutional encoder with optional spatial attention.

Pipeline: ``[conv3x3 -> relu -> avgpool2]* -> conv3x3 -> relu -> attention ->
global average pool -> linear -> l2 normalize``. With the default 32x32 input
and widths 16/32/64 the attention block sees an 8x8 map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Union

import numpy as np

from .attention import AttentionLayer, attention_forward, init_attention
from .config import RunConfig
from .errors import ConfigError, DimensionError
from .etf import EtfClassifier, build_etf, logits as etf_logits, nearest_prototype
from .tensor import (
    Tensor,
    as_tensor,
    avg_pool2d,
    conv2d,
    global_average_pool,
    l2_normalize,
    matmul,
    no_grad,
    relu,
)


@dataclass
class EncoderModel:
    conv_weights: List[Tensor]
    conv_biases: List[Tensor]
    attention: AttentionLayer
    proj: Tensor  # C x d
    proj_bias: Tensor  # d
    use_attention: bool = True
    image_size: int = 32

    @property
    def feature_dim(self) -> int:
        return self.proj.shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        """Trainable tensors in a fixed, documented order."""
        params: Dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            params[f"conv{i}.weight"] = w
            params[f"conv{i}.bias"] = b
        for name, t in self.attention.parameters().items():
            params[f"attention.{name}"] = t
        params["proj.weight"] = self.proj
        params["proj.bias"] = self.proj_bias
        return params


@dataclass
class LinearClassifier:
    """Trainable ``d x K`` classifier used by the no-ETF ablation arm.

    Logits are ``logit_scale * f @ W``: the same temperature the ETF head
    applies, so the two arms differ only in whether the matrix is learned.
    """

    W: Tensor
    K: int
    d: int
    logit_scale: float = 16.0


Head = Union[EtfClassifier, LinearClassifier]


def init_encoder(cfg: RunConfig, seed: int) -> EncoderModel:
    """Deterministic He-uniform conv init, uniform fan-in projection, ``gamma = 0``."""
    if cfg.d < cfg.K:
        raise ConfigError(f"feature dimension d={cfg.d} must be >= K={cfg.K}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    in_ch = 3
    for width in cfg.widths:
        fan_in = in_ch * 9
        bound = math.sqrt(6.0 / fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, (width, in_ch, 3, 3)), requires_grad=True))
        biases.append(Tensor(np.zeros(width), requires_grad=True))
        in_ch = width
    attention = init_attention(in_ch, rng)
    bound = 1.0 / math.sqrt(in_ch)
    proj = Tensor(rng.uniform(-bound, bound, (in_ch, cfg.d)), requires_grad=True)
    proj_bias = Tensor(np.zeros(cfg.d), requires_grad=True)
    return EncoderModel(
        conv_weights=weights,
        conv_biases=biases,
        attention=attention,
        proj=proj,
        proj_bias=proj_bias,
        use_attention=cfg.use_attention,
        image_size=cfg.image_size,
    )


def calibrate_encoder(m: EncoderModel, images: np.ndarray, eps: float = 1e-8) -> EncoderModel:
    """Data-dependent rescaling of the convolution stack, in place.

    Layer by layer, each output channel's weights and bias are rescaled so its
    pre-activation has zero mean and unit variance over ``images``. Without it
    the pooled features of a fresh network are nearly identical across inputs
    (pairwise cosine above 0.99 after projection and normalisation) and the
    cosine classifier sits on a loss plateau for many epochs. Run once before
    source training; the projection and attention are left untouched.
    """
    x = as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != (3, m.image_size, m.image_size) or x.shape[0] < 2:
        raise DimensionError(f"calibration needs at least two B x 3 x {m.image_size} x {m.image_size} images, got {x.shape}")
    last = len(m.conv_weights) - 1
    with no_grad():
        for i, (w, b) in enumerate(zip(m.conv_weights, m.conv_biases)):
            pre = conv2d(x, w, stride=1, padding=1).data
            mu = pre.mean(axis=(0, 2, 3))
            sd = pre.std(axis=(0, 2, 3)) + eps
            w.data = w.data / sd[:, None, None, None]
            b.data = -mu / sd
            x = relu(conv2d(x, w, stride=1, padding=1) + b.reshape(1, -1, 1, 1))
            if i < last:
                x = avg_pool2d(x, 2)
    return m


def feature_map(m: EncoderModel, images) -> Tensor:
    """Convolutional stack output (before attention), ``B x C x h x w``."""
    x = as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != (3, m.image_size, m.image_size):
        raise DimensionError(f"expected images of shape B x 3 x {m.image_size} x {m.image_size}, got {x.shape}")
    last = len(m.conv_weights) - 1
    for i, (w, b) in enumerate(zip(m.conv_weights, m.conv_biases)):
        x = relu(conv2d(x, w, stride=1, padding=1) + b.reshape(1, -1, 1, 1))
        if i < last:
            x = avg_pool2d(x, 2)
    return x


def forward(m: EncoderModel, images) -> Tensor:
    """Unit-norm ``B x d`` embeddings."""
    x = feature_map(m, images)
    if m.use_attention:
        x = attention_forward(m.attention, x)
    pooled = global_average_pool(x)
    return l2_normalize(matmul(pooled, m.proj) + m.proj_bias, axis=1)


# -- classifier heads ---------------------------------------------------------------
def init_head(cfg: RunConfig, seed: int) -> Head:
    """ETF classifier when ``cfg.use_etf`` else a trainable linear layer of the same shape."""
    if cfg.use_etf:
        return build_etf(cfg.K, cfg.d, seed, cfg.logit_scale)
    rng = np.random.default_rng([seed, 1])
    bound = 1.0 / math.sqrt(cfg.d)
    W = Tensor(rng.uniform(-bound, bound, (cfg.d, cfg.K)), requires_grad=True)
    return LinearClassifier(W=W, K=cfg.K, d=cfg.d, logit_scale=cfg.logit_scale)


def head_matrix(head: Head) -> Tensor:
    return head.E if isinstance(head, EtfClassifier) else head.W


def head_logits(head: Head, features) -> Tensor:
    if isinstance(head, EtfClassifier):
        return etf_logits(head, features)
    return matmul(as_tensor(features), head.W) * head.logit_scale


def head_predict(head: Head, features) -> np.ndarray:
    if isinstance(head, EtfClassifier):
        return nearest_prototype(features, head.E)
    return np.argmax(as_tensor(features).data @ head.W.data, axis=1)


def head_parameters(head: Head) -> Dict[str, Tensor]:
    return {} if isinstance(head, EtfClassifier) else {"classifier.weight": head.W}


__all__ = [
    "EncoderModel",
    "LinearClassifier",
    "Head",
    "init_encoder",
    "calibrate_encoder",
    "feature_map",
    "forward",
    "init_head",
    "head_matrix",
    "head_logits",
    "head_predict",
    "head_parameters",
]
