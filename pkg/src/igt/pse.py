"""Learnable positional-structural encoder for the evolving soft subgraphs.

Hand-crafted spectral encodings can only be precomputed for the original
graph; the two soft subgraphs change on every optimizer step. This encoder
runs a small MPNN over each subgraph's (gradient-severed) soft adjacency
with freshly drawn Gaussian node features, and an auxiliary L1 loss pulls a
linear readout of its output toward the original graph's spectral encoding.

Random features are resampled on every training forward pass; at evaluation
they are frozen per graph via a seed derived from the graph id, so reported
metrics are reproducible bit for bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, abs_loss, add, linear, matmul, relu, stop_gradient
from .disentangler import glorot, normalized_propagate, zeros_param


@dataclass
class RandomFeatureSpec:
    """Width and draw discipline for the encoder's Gaussian node features."""

    width: int = 16

    def draw_train(self, n_nodes: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(size=(n_nodes, self.width))

    def draw_eval(self, graph_id: str, n_nodes: int) -> np.ndarray:
        seed = zlib.crc32(graph_id.encode("utf-8"))
        rng = np.random.default_rng([seed, self.width])
        return rng.normal(size=(n_nodes, self.width))


@dataclass
class PseEncoderParams:
    layer_ws: list[Tensor]       # d_r -> d_pse -> ... -> d_pse
    recover_w: Tensor            # d_pse -> number of spectral targets
    recover_b: Tensor


def init_pse_encoder(rng: np.random.Generator, d_r: int, d_pse: int,
                     n_layers: int, n_targets: int) -> PseEncoderParams:
    widths = [d_r] + [d_pse] * n_layers
    return PseEncoderParams(
        layer_ws=[glorot(rng, widths[i], widths[i + 1]) for i in range(n_layers)],
        recover_w=glorot(rng, d_pse, n_targets),
        recover_b=zeros_param(n_targets),
    )


def encode_subgraph(adj_soft: Tensor, rand_feats: np.ndarray | Tensor,
                    p: PseEncoderParams) -> Tensor:
    """MPNN rounds over a soft adjacency with random node features.

    The adjacency is passed through a gradient barrier here, so no downstream
    loss can reach the disentangler through this encoder.
    """
    propagate = normalized_propagate(stop_gradient(adj_soft))
    h = rand_feats if isinstance(rand_feats, Tensor) else Tensor(rand_feats)
    for w in p.layer_ws:
        h = relu(matmul(matmul(propagate, h), w))
    return h


def recover_encoding(z_pse: Tensor, p: PseEncoderParams) -> Tensor:
    """Linear readout predicting the hand-crafted spectral encoding."""
    return linear(z_pse, p.recover_w, p.recover_b)


def pse_recovery_loss(z_pse_inv: Tensor, z_pse_var: Tensor,
                      target: np.ndarray | Tensor, p: PseEncoderParams) -> Tensor:
    """Sum over both branches of the node-averaged L1 recovery error."""
    t = target if isinstance(target, Tensor) else Tensor(target)
    return add(abs_loss(recover_encoding(z_pse_inv, p), t),
               abs_loss(recover_encoding(z_pse_var, p), t))
