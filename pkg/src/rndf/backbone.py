"""Residual fully-connected feature extractor.

The network maps an input to one logit per splitting node of the forest::

    embed -> [x + H_k(x)] * num_blocks -> head1 (relu) -> head2

where each ``H_k`` is linear -> relu -> linear on ``embed_dim`` features.
Image inputs may be average-pooled by an integer factor before flattening so
that input gradients stay aligned with the original pixels.
"""
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor, relu, reshape, reduce_mean


@dataclass
class BackboneConfig:
    input_dim: int
    num_split_outputs: int
    embed_dim: int = 64
    num_blocks: int = 2
    hidden_dim: int = 64
    head_dim: int = 128
    # average-pool factor for image inputs; requires image_shape
    pool: Optional[int] = None
    # (channels, height, width) of un-flattened inputs, if any
    image_shape: Optional[Tuple[int, int, int]] = None
    seed: int = 0

    def __post_init__(self):
        if self.image_shape is not None:
            self.image_shape = tuple(int(v) for v in self.image_shape)
        for name in ("input_dim", "num_split_outputs", "embed_dim", "hidden_dim", "head_dim"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be non-negative")
        if self.pool is not None:
            if self.pool < 1:
                raise ValueError("pool must be >= 1")
            if self.image_shape is None:
                raise ValueError("pool requires image_shape")
        if self.image_shape is not None:
            c, h, w = self.image_shape
            p = self.pool or 1
            if h % p or w % p:
                raise ValueError(f"image {h}x{w} not divisible by pool factor {p}")
            if c * (h // p) * (w // p) != self.input_dim:
                raise ValueError(
                    f"input_dim {self.input_dim} != pooled image size {c * (h // p) * (w // p)}")


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    # U(-a, a) has variance a^2 / 3 = 2 / fan_in
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Backbone:
    """Parameters and forward pass of the residual feature extractor.

    ``params`` is an ordered mapping of name -> Tensor; weights are stored as
    ``(fan_in, fan_out)`` so a layer is ``x @ W + b``.
    """

    def __init__(self, cfg: BackboneConfig, params: Optional[Dict[str, Tensor]] = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[name + ".weight"] + self.params[name + ".bias"]

    def residual_block(self, x: Tensor, k: int) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.cfg.embed_dim:
            raise DimensionError(f"residual block expects (batch, {self.cfg.embed_dim}), got {x.shape}")
        h = relu(self._linear(x, f"blocks.{k}.fc1"))
        return x + self._linear(h, f"blocks.{k}.fc2")

    def flatten_input(self, x) -> Tensor:
        """Pool (if configured) and flatten to ``(batch, input_dim)``."""
        x = as_tensor(x)
        cfg = self.cfg
        if cfg.image_shape is not None and x.ndim != 2:
            c, h, w = cfg.image_shape
            if x.shape[1:] != (c, h, w):
                raise DimensionError(f"expected images of shape {(c, h, w)}, got {x.shape[1:]}")
            p = cfg.pool or 1
            if p > 1:
                x = reshape(x, (x.shape[0], c, h // p, p, w // p, p))
                x = reduce_mean(x, axis=(3, 5))
            x = reshape(x, (x.shape[0], cfg.input_dim))
        if x.ndim != 2 or x.shape[1] != cfg.input_dim:
            raise DimensionError(f"expected input of width {cfg.input_dim}, got shape {x.shape}")
        return x

    def forward(self, x) -> Tensor:
        """Raw logits ``(batch, num_split_outputs)``; sigmoid is left to the forest."""
        h = self._linear(self.flatten_input(x), "embed")
        for k in range(self.cfg.num_blocks):
            h = self.residual_block(h, k)
        h = relu(self._linear(h, "head1"))
        return self._linear(h, "head2")

    __call__ = forward


def init_params(cfg: BackboneConfig) -> Dict[str, Tensor]:
    """He-style scaled-uniform weights, zero biases, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params: Dict[str, Tensor] = OrderedDict()

    def layer(name, fan_in, fan_out):
        params[name + ".weight"] = Tensor(_he_uniform(rng, fan_in, fan_out), requires_grad=True)
        params[name + ".bias"] = Tensor(np.zeros(fan_out), requires_grad=True)

    layer("embed", cfg.input_dim, cfg.embed_dim)
    for k in range(cfg.num_blocks):
        layer(f"blocks.{k}.fc1", cfg.embed_dim, cfg.hidden_dim)
        layer(f"blocks.{k}.fc2", cfg.hidden_dim, cfg.embed_dim)
    layer("head1", cfg.embed_dim, cfg.head_dim)
    layer("head2", cfg.head_dim, cfg.num_split_outputs)
    return params


def backbone_init(cfg: BackboneConfig) -> Backbone:
    return Backbone(cfg, init_params(cfg))
