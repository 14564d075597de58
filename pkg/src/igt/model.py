"""Model assembly: configuration, parameter containers and full forward passes.

Two architectures share the same backbone capacity: the full model
(disentangler + subgraph encoder + twin prediction heads) and a plain
baseline that runs the backbone and one hybrid layer over the whole graph
with a single classifier.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .disentangler import (DisentanglerOutput, DisentanglerParams, gt_backbone,
                           glorot, hybrid_layer, init_disentangler, init_hybrid_layer,
                           zeros_param)
from .graphs import Graph
from .heads import HeadParams, init_head, predict_branches
from .pse import PseEncoderParams, RandomFeatureSpec, encode_subgraph, init_pse_encoder
from .tensor import Tensor, add, concat_cols, mean_pool_rows, vecmat
from . import disentangler as dis


@dataclass
class ModelConfig:
    """Architecture hyperparameters; widths must respect the head count."""

    classes: int = 3
    feature_dim: int = 1
    d: int = 128
    heads: int = 4
    backbone_layers: int = 2
    pse_layers: int = 3
    d_pse: int = 32
    d_r: int = 16
    pse_targets: int = 8
    with_encoder: bool = True
    erm: bool = False

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.branch_width % self.heads:
            raise ConfigError(
                f"branch width {self.branch_width} not divisible by {self.heads} heads")
        for name in ("classes", "feature_dim", "d", "heads", "backbone_layers",
                     "pse_layers", "d_pse", "d_r", "pse_targets"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def branch_width(self) -> int:
        return self.d + (self.d_pse if self.with_encoder and not self.erm else 0)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    """All learnable weights of the full model."""

    config: ModelConfig
    disent: DisentanglerParams
    pse: PseEncoderParams | None
    head: HeadParams


@dataclass
class ErmParams:
    """Baseline weights: backbone, one hybrid layer, one classifier."""

    config: ModelConfig
    backbone: dis.BackboneParams
    gt_layer: dis.HybridLayerParams
    w_out: Tensor
    b_out: Tensor


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams | ErmParams:
    if cfg.erm:
        return ErmParams(
            config=cfg,
            backbone=dis.init_backbone(rng, cfg.feature_dim, cfg.d, cfg.heads,
                                       cfg.backbone_layers),
            gt_layer=init_hybrid_layer(rng, cfg.d, cfg.heads),
            w_out=glorot(rng, cfg.d, cfg.classes),
            b_out=zeros_param(cfg.classes),
        )
    return ModelParams(
        config=cfg,
        disent=init_disentangler(rng, cfg.feature_dim, cfg.d, cfg.heads,
                                 cfg.backbone_layers),
        pse=(init_pse_encoder(rng, cfg.d_r, cfg.d_pse, cfg.pse_layers, cfg.pse_targets)
             if cfg.with_encoder else None),
        head=init_head(rng, cfg.branch_width, cfg.heads, cfg.classes),
    )


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested parameter dataclasses/lists and yield (name, tensor) pairs
    in a deterministic order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            if f.name == "config":
                continue
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}")
    # plain values (ints, strings, None) carry no parameters


def parameter_list(params) -> list[Tensor]:
    return [t for _, t in named_tensors(params)]


@dataclass
class GraphForward:
    """Forward-pass products of one graph needed by losses and metrics."""

    disent: DisentanglerOutput
    z_pse_inv: Tensor | None
    z_pse_var: Tensor | None
    logits_inv: Tensor
    logits_var: Tensor


def forward_graph(params: ModelParams, g: Graph, *, temperature: float = 1.0,
                  rng: np.random.Generator | None = None,
                  rand_feats: np.ndarray | None = None) -> GraphForward:
    """Full forward pass for one graph.

    Random encoder features are taken from ``rand_feats`` when given, else
    drawn from ``rng`` (training mode), else frozen per graph id
    (evaluation mode).
    """
    cfg = params.config
    adj = Tensor(g.adjacency())
    x = Tensor(g.node_features)
    out = dis.disentangle(x, adj, Tensor(g.propagate_np()), params.disent, t=temperature)

    z_pse_inv = z_pse_var = None
    h_inv, h_var = out.z_inv, out.z_var
    if cfg.with_encoder:
        spec = RandomFeatureSpec(width=cfg.d_r)
        if rand_feats is None:
            if rng is not None:
                rand_feats = spec.draw_train(g.n_nodes, rng)
            else:
                rand_feats = spec.draw_eval(g.graph_id, g.n_nodes)
        z_pse_inv = encode_subgraph(out.adj_inv, rand_feats, params.pse)
        z_pse_var = encode_subgraph(out.adj_var, rand_feats, params.pse)
        h_inv = concat_cols([out.z_inv, z_pse_inv])
        h_var = concat_cols([out.z_var, z_pse_var])

    logits_inv, logits_var = predict_branches(h_inv, h_var, out.adj_inv, out.adj_var,
                                              params.head)
    return GraphForward(disent=out, z_pse_inv=z_pse_inv, z_pse_var=z_pse_var,
                        logits_inv=logits_inv, logits_var=logits_var)


def forward_erm(params: ErmParams, g: Graph) -> Tensor:
    """Baseline forward pass: whole graph, single classifier."""
    propagate = Tensor(g.propagate_np())
    z = gt_backbone(Tensor(g.node_features), propagate, params.backbone)
    pooled = mean_pool_rows(hybrid_layer(z, propagate, params.gt_layer))
    return add(vecmat(pooled, params.w_out), params.b_out)


def infer(g: Graph, params: ModelParams | ErmParams, t_g: float = 1.0) -> int:
    """Predicted class index; the variant branch is never consulted."""
    if isinstance(params, ErmParams):
        return int(np.argmax(forward_erm(params, g).data))
    return int(np.argmax(forward_graph(params, g, temperature=t_g).logits_inv.data))
