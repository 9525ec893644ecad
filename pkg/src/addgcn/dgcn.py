"""Static and dynamic graph convolutions over per-class representations.

Node features are batched as (B, C, D): one D-dimensional vector per class.
The static adjacency ``A_s`` is a free C x C parameter shared by every
sample; the dynamic adjacency ``A_d`` is estimated per sample from the node
features and their global context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import Module, bias_param, init_uniform
from .tensor import DimensionError, Tensor

GRAPH_MODES = ("S", "D", "P_add", "P_mul", "P_cat", "D_then_S", "S_then_D")


@dataclass(frozen=True)
class GraphHeadConfig:
    num_classes: int
    in_dim: int  # D'
    hidden_dim: int = 64  # D1
    out_dim: int = 64  # D2
    mode: str = "S_then_D"
    slope: float = 0.2
    bias: bool = True
    static_identity_init: bool = False

    def __post_init__(self):
        if self.mode not in GRAPH_MODES:
            raise ConfigError(f"unknown graph mode {self.mode!r}; expected one of {GRAPH_MODES}")
        if min(self.num_classes, self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ConfigError("graph dimensions must be positive")


def _check_nodes(v: Tensor, c: int, d: int, what: str) -> None:
    if v.ndim != 3 or v.shape[1] != c or v.shape[2] != d:
        raise DimensionError(f"{what}: expected (B, {c}, {d}) node features, got {v.shape}")


class StaticGraphLayer(Module):
    def __init__(self, num_classes: int, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, identity_init: bool = False):
        self.adj = init_uniform(rng, (num_classes, num_classes), num_classes)
        if identity_init:
            self.adj.data += np.eye(num_classes, dtype=np.float32)
        self.weight = init_uniform(rng, (d_in, d_out), d_in)
        self.bias = bias_param(bias, rng, d_out, d_in)


class DynamicGraphLayer(Module):
    def __init__(self, num_classes: int, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        self.ctx_w = init_uniform(rng, (d_in, d_in), d_in)
        self.ctx_b = bias_param(bias, rng, d_in, d_in)
        self.adj_w = init_uniform(rng, (num_classes, 2 * d_in), 2 * d_in)
        self.adj_b = bias_param(bias, rng, num_classes, 2 * d_in)
        self.weight = init_uniform(rng, (d_in, d_out), d_in)
        self.bias = bias_param(bias, rng, d_out, d_in)


def static_gcn(v: Tensor, layer: StaticGraphLayer, slope: float = 0.2) -> Tensor:
    """H = LeakyReLU(A_s V W_s + b) per sample."""
    c = layer.adj.shape[0]
    _check_nodes(v, c, layer.weight.shape[0], "static_gcn")
    out = T.matmul(T.matmul(layer.adj, v), layer.weight)
    if layer.bias is not None:
        out = T.add(out, layer.bias)
    return T.leaky_relu(out, slope)


def global_context(h: Tensor, layer: DynamicGraphLayer) -> Tensor:
    """h_g: mean over the class axis followed by a linear (1x1 conv) map."""
    pooled = T.mean(h, axis=1)
    out = T.matmul(pooled, T.transpose(layer.ctx_w))
    return out if layer.ctx_b is None else T.add(out, layer.ctx_b)


def dynamic_adjacency(h: Tensor, layer: DynamicGraphLayer) -> Tensor:
    """A_d = sigmoid(W_A H'), H' stacking each node vector on top of h_g."""
    c = layer.adj_w.shape[0]
    _check_nodes(h, c, layer.ctx_w.shape[0], "dynamic_adjacency")
    b, _, d = h.shape
    hg = T.broadcast_to(T.reshape(global_context(h, layer), (b, 1, d)), (b, c, d))
    stacked = T.swapaxes(T.concat([h, hg], axis=2), 1, 2)  # (B, 2D, C)
    logits = T.matmul(layer.adj_w, stacked)  # rows: output channel, cols: node
    if layer.adj_b is not None:
        logits = T.add(logits, T.reshape(layer.adj_b, (c, 1)))
    return T.sigmoid(logits)


def dynamic_gcn(h: Tensor, layer: DynamicGraphLayer, slope: float = 0.2,
                adjacency: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Z = LeakyReLU(A_d H W_d + b); returns ``(Z, A_d)``.

    ``adjacency`` replaces the estimated A_d (test hook).
    """
    _check_nodes(h, layer.adj_w.shape[0], layer.weight.shape[0], "dynamic_gcn")
    adj = dynamic_adjacency(h, layer) if adjacency is None else adjacency
    out = T.matmul(T.matmul(adj, h), layer.weight)
    if layer.bias is not None:
        out = T.add(out, layer.bias)
    return T.leaky_relu(out, slope), adj


class GraphHead(Module):
    """All seven static/dynamic combinations behind one call."""

    def __init__(self, cfg: GraphHeadConfig, rng: np.random.Generator):
        self.cfg = cfg
        c, dp, d1, d2 = cfg.num_classes, cfg.in_dim, cfg.hidden_dim, cfg.out_dim

        def static(d_in, d_out):
            return StaticGraphLayer(c, d_in, d_out, rng, cfg.bias, cfg.static_identity_init)

        def dynamic(d_in, d_out):
            return DynamicGraphLayer(c, d_in, d_out, rng, cfg.bias)

        mode = cfg.mode
        if mode == "S":
            self.static = static(dp, d2)
        elif mode == "D":
            self.dynamic = dynamic(dp, d2)
        elif mode == "S_then_D":
            self.static = static(dp, d1)
            self.dynamic = dynamic(d1, d2)
        elif mode == "D_then_S":
            self.dynamic = dynamic(dp, d1)
            self.static = static(d1, d2)
        else:
            self.static = static(dp, d2)
            self.dynamic = dynamic(dp, d2)
            if mode == "P_cat":
                self.proj_w = init_uniform(rng, (2 * d2, d2), 2 * d2)
                self.proj_b = bias_param(cfg.bias, rng, d2, 2 * d2)

    def __call__(self, v: Tensor) -> tuple[Tensor, Tensor | None]:
        """Return ``(Z, A_d)``; ``A_d`` is None when no dynamic graph is used."""
        mode, slope = self.cfg.mode, self.cfg.slope
        if mode == "S":
            return static_gcn(v, self.static, slope), None
        if mode == "D":
            return dynamic_gcn(v, self.dynamic, slope)
        if mode == "S_then_D":
            return dynamic_gcn(static_gcn(v, self.static, slope), self.dynamic, slope)
        if mode == "D_then_S":
            h, adj = dynamic_gcn(v, self.dynamic, slope)
            return static_gcn(h, self.static, slope), adj
        zs = static_gcn(v, self.static, slope)
        zd, adj = dynamic_gcn(v, self.dynamic, slope)
        if mode == "P_add":
            return T.add(zs, zd), adj
        if mode == "P_mul":
            return T.mul(zs, zd), adj
        if mode == "P_cat":
            out = T.matmul(T.concat([zs, zd], axis=2), self.proj_w)
            if self.proj_b is not None:
                out = T.add(out, self.proj_b)
            return out, adj
        raise ConfigError(f"unknown graph mode {mode!r}")
