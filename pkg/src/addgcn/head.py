"""Relation-path scores, score fusion and the multi-label BCE loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Module, bias_param, init_uniform
from .tensor import ContractError, DimensionError, Tensor

AGGREGATIONS = ("Bi", "Sum", "Avg", "Max")


@dataclass
class ScoreBundle:
    s_r: Tensor | None
    s_m: Tensor | None
    s: Tensor


class RelationClassifier(Module):
    """Per-class binary classifiers (``Bi``) or one shared C-way classifier
    applied to Z aggregated over the class axis (``Sum``/``Avg``/``Max``)."""

    def __init__(self, num_classes: int, dim: int, mode: str, rng: np.random.Generator,
                 bias: bool = True):
        if mode not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {mode!r}; expected one of {AGGREGATIONS}")
        self.mode = mode
        self.weight = init_uniform(rng, (num_classes, dim), dim)
        self.bias = bias_param(bias, rng, num_classes, dim)

    def __call__(self, z: Tensor) -> Tensor:
        return relation_scores(z, self.mode, self.weight, self.bias)


def relation_scores(z: Tensor, mode: str, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if z.ndim != 3 or z.shape[2] != weight.shape[1]:
        raise DimensionError(f"relation_scores: Z {z.shape} vs weights {weight.shape}")
    if mode == "Bi":
        if z.shape[1] != weight.shape[0]:
            raise DimensionError(f"Bi classifier: {weight.shape[0]} classes, Z has {z.shape[1]}")
        out = T.sum_(T.mul(z, weight), axis=2)
    else:
        if mode == "Sum":
            pooled = T.sum_(z, axis=1)
        elif mode == "Avg":
            pooled = T.mean(z, axis=1)
        elif mode == "Max":
            pooled = T.max_axis(z, axis=1)
        else:
            raise ConfigError(f"unknown aggregation {mode!r}")
        out = T.matmul(pooled, T.transpose(weight))
    return out if bias is None else T.add(out, bias)


def fuse_scores(s_r: Tensor, s_m: Tensor) -> Tensor:
    """Average of the two logit vectors."""
    if s_r.shape != s_m.shape:
        raise DimensionError(f"fuse_scores: {s_r.shape} vs {s_m.shape}")
    return T.scale(T.add(s_r, s_m), 0.5)


def _check_labels(y, shape) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise DimensionError(f"labels {y.shape} do not match scores {tuple(shape)}")
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be binary (0 or 1)")
    return y.astype(np.float32)


def bce_loss(s: Tensor, y) -> Tensor:
    """Negative log-likelihood of independent sigmoids, summed over classes,
    averaged over the batch. Uses log(sigmoid(s)) = -softplus(-s)."""
    y = _check_labels(y, s.shape)
    pos = T.mul(y, T.softplus(T.scale(s, -1.0)))
    neg = T.mul(1.0 - y, T.softplus(s))
    return T.mean(T.sum_(T.add(pos, neg), axis=-1))
