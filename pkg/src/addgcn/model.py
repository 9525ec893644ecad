"""Full ADD-GCN head and the GAP-linear baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dgcn import GraphHead, GraphHeadConfig
from .head import RelationClassifier, ScoreBundle, fuse_scores
from .nn import Module, bias_param, init_uniform
from .sam import SamConfig, SamOutput, SemanticAttention
from .tensor import Tensor


@dataclass
class ForwardResult:
    scores: ScoreBundle
    sam: SamOutput | None = None
    z: Tensor | None = None
    dynamic_adj: Tensor | None = None
    extras: dict = field(default_factory=dict)


class AddGcn(Module):
    def __init__(self, sam_cfg: SamConfig, graph_cfg: GraphHeadConfig, aggregation: str = "Bi",
                 rng: np.random.Generator | None = None, fuse: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        if graph_cfg.in_dim != sam_cfg.repr_channels:
            raise ValueError(
                f"graph in_dim {graph_cfg.in_dim} must equal SAM repr_channels {sam_cfg.repr_channels}"
            )
        self.sam = SemanticAttention(sam_cfg, rng)
        self.graph = GraphHead(graph_cfg, rng)
        self.classifier = RelationClassifier(
            sam_cfg.num_classes, graph_cfg.out_dim, aggregation, rng, graph_cfg.bias
        )
        self.fuse = fuse

    def forward(self, x: Tensor) -> ForwardResult:
        sam = self.sam(x)
        z, adj = self.graph(sam.reprs)
        s_r = self.classifier(z)
        s = fuse_scores(s_r, sam.scores) if self.fuse else s_r
        return ForwardResult(ScoreBundle(s_r=s_r, s_m=sam.scores, s=s), sam=sam, z=z, dynamic_adj=adj)

    __call__ = forward

    @property
    def static_adj(self) -> Tensor | None:
        layer = getattr(self.graph, "static", None)
        return None if layer is None else layer.adj

    def param_group(self, name: str) -> str:
        """``features`` for the X -> X' transform (the backbone stand-in), else ``head``."""
        return "features" if name.startswith("sam.transform_") else "head"


class GapLinear(Module):
    """Linear classifier on globally average-pooled features."""

    def __init__(self, num_classes: int, in_channels: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = init_uniform(rng, (num_classes, in_channels), in_channels)
        self.bias = bias_param(bias, rng, num_classes, in_channels)

    def forward(self, x: Tensor) -> ForwardResult:
        s = T.matmul(T.global_pool(x, "avg"), T.transpose(self.weight))
        if self.bias is not None:
            s = T.add(s, self.bias)
        return ForwardResult(ScoreBundle(s_r=None, s_m=None, s=s))

    __call__ = forward

    def param_group(self, name: str) -> str:
        return "head"
