"""Semantic attention: per-class activation maps and content-aware representations.

The feature map ``x`` is channel-first, (B, D, H, W). Three ways of building
the activation maps are supported:

``cls_then_gmp``
    classify every spatial position with a 1x1 conv, squash the responses
    with a sigmoid to get the maps, and max-pool the raw responses to get
    the attention-path scores.
``gap_then_cls`` / ``gmp_then_cls``
    classic CAM: pool first, classify the pooled vector, and reuse the
    classifier weights as a 1x1 conv to draw the maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Module, bias_param, init_uniform
from .tensor import DimensionError, Tensor

MAP_MODES = ("cls_then_gmp", "gap_then_cls", "gmp_then_cls")


@dataclass(frozen=True)
class SamConfig:
    num_classes: int
    in_channels: int
    repr_channels: int = 64
    map_mode: str = "cls_then_gmp"
    sigmoid_maps: bool = True
    score_pool: str = "max"  # pooling of raw maps into s_m in cls_then_gmp mode
    slope: float = 0.2
    bias: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.in_channels < 1 or self.repr_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.map_mode not in MAP_MODES:
            raise ConfigError(f"unknown map_mode {self.map_mode!r}; expected one of {MAP_MODES}")
        if self.score_pool not in ("max", "avg"):
            raise ConfigError(f"unknown score_pool {self.score_pool!r}")


@dataclass
class SamOutput:
    maps: Tensor  # M, (B, C, H, W)
    reprs: Tensor  # V, (B, C, D')
    scores: Tensor  # s_m, (B, C)


def transform_features(x: Tensor, w: Tensor, b: Tensor | None, slope: float = 0.2) -> Tensor:
    """X -> X': one pointwise conv followed by LeakyReLU."""
    return T.leaky_relu(T.conv1x1(x, w, b), slope)


def _linear(v: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    out = T.matmul(v, T.transpose(w))
    return out if b is None else T.add(out, b)


def activation_maps(x: Tensor, cls_w: Tensor, cls_b: Tensor | None, cfg: SamConfig):
    """Return ``(M, s_m)`` for the configured map mode."""
    if x.ndim != 4 or x.shape[1] != cls_w.shape[1]:
        raise DimensionError(f"activation_maps: input {x.shape} vs classifier {cls_w.shape}")
    raw = T.conv1x1(x, cls_w, cls_b)
    if cfg.map_mode == "cls_then_gmp":
        scores = T.global_pool(raw, cfg.score_pool)
    elif cfg.map_mode == "gap_then_cls":
        scores = _linear(T.global_pool(x, "avg"), cls_w, cls_b)
    elif cfg.map_mode == "gmp_then_cls":
        scores = _linear(T.global_pool(x, "max"), cls_w, cls_b)
    else:
        raise ConfigError(f"unknown map_mode {cfg.map_mode!r}")
    maps = T.sigmoid(raw) if cfg.sigmoid_maps else raw
    return maps, scores


def category_representations(maps: Tensor, xp: Tensor) -> Tensor:
    """v_c = sum_ij M[c, i, j] * X'[:, i, j] for every sample and class."""
    if maps.ndim != 4 or xp.ndim != 4 or maps.shape[0] != xp.shape[0] or maps.shape[2:] != xp.shape[2:]:
        raise DimensionError(f"category_representations: maps {maps.shape} vs features {xp.shape}")
    b, c, h, w = maps.shape
    m = T.reshape(maps, (b, c, h * w))
    f = T.reshape(xp, (b, xp.shape[1], h * w))
    return T.matmul(m, T.swapaxes(f, 1, 2))


class SemanticAttention(Module):
    def __init__(self, cfg: SamConfig, rng: np.random.Generator):
        self.cfg = cfg
        d, dp, c = cfg.in_channels, cfg.repr_channels, cfg.num_classes
        self.transform_w = init_uniform(rng, (dp, d), d)
        self.transform_b = bias_param(cfg.bias, rng, dp, d)
        self.cls_w = init_uniform(rng, (c, d), d)
        self.cls_b = bias_param(cfg.bias, rng, c, d)

    def __call__(self, x: Tensor) -> SamOutput:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise DimensionError(
                f"SAM expects (B, {self.cfg.in_channels}, H, W), got {x.shape}"
            )
        xp = transform_features(x, self.transform_w, self.transform_b, self.cfg.slope)
        maps, scores = activation_maps(x, self.cls_w, self.cls_b, self.cfg)
        return SamOutput(maps=maps, reprs=category_representations(maps, xp), scores=scores)
