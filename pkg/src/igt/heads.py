"""Prediction heads and the training objective.

Each branch runs one more hybrid layer over its own soft adjacency, mean
pools, and feeds a branch-specific linear classifier. During training the
two branches are combined multiplicatively: the variant logits act as a
sigmoid gate on the invariant logits, and swapping gates between graphs of a
batch realizes interventions on the variant part. At inference only the
invariant branch is consulted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .disentangler import (HybridLayerParams, glorot, hybrid_layer, init_hybrid_layer,
                           normalized_propagate, zeros_param)
from .tensor import (Tensor, add, cross_entropy_logits, gather_rows, mean_pool_rows,
                     mean_scalars, mul, scale, sigmoid, stack_rows, variance_over_set,
                     vecmat)


@dataclass
class HeadParams:
    gt_layer: HybridLayerParams   # shared by both branches
    w_inv: Tensor
    b_inv: Tensor
    w_var: Tensor
    b_var: Tensor


def init_head(rng: np.random.Generator, d_branch: int, heads: int,
              classes: int) -> HeadParams:
    return HeadParams(
        gt_layer=init_hybrid_layer(rng, d_branch, heads),
        w_inv=glorot(rng, d_branch, classes), b_inv=zeros_param(classes),
        w_var=glorot(rng, d_branch, classes), b_var=zeros_param(classes),
    )


def branch_logits(h: Tensor, adj_branch: Tensor, p: HeadParams,
                  w: Tensor, b: Tensor) -> Tensor:
    pooled = mean_pool_rows(hybrid_layer(h, normalized_propagate(adj_branch), p.gt_layer))
    return add(vecmat(pooled, w), b)


def predict_branches(h_inv: Tensor, h_var: Tensor, adj_inv: Tensor, adj_var: Tensor,
                     p: HeadParams) -> tuple[Tensor, Tensor]:
    """Class logits for the invariant and variant branch of one graph."""
    return (branch_logits(h_inv, adj_inv, p, p.w_inv, p.b_inv),
            branch_logits(h_var, adj_var, p, p.w_var, p.b_var))


def combine_prediction(logits_inv: Tensor, logits_var: Tensor) -> Tensor:
    """Gate the invariant logits elementwise by the sigmoid of the variant ones."""
    return mul(logits_inv, sigmoid(logits_var))


def intervention_loss(logits_inv: Sequence[Tensor], logits_var: Sequence[Tensor],
                      labels: Sequence[int], n_interventions: int, penalty: float,
                      rng: np.random.Generator) -> tuple[Tensor, list[float]]:
    """Mean plus penalty-weighted variance of interventional batch losses.

    Each intervention swaps the variant gates across the batch with a random
    permutation; the first intervention is the identity, so the factual batch
    loss is always included. Returns the combined loss and the individual
    per-intervention values for logging.
    """
    if len(logits_inv) < 2:
        raise ConfigError("intervention loss needs a batch of at least 2 graphs")
    if n_interventions < 1:
        raise ConfigError(f"need at least 1 intervention, got {n_interventions}")
    if penalty < 0:
        raise ConfigError(f"variance penalty must be nonnegative, got {penalty}")
    inv = stack_rows(logits_inv)
    gate = sigmoid(stack_rows(logits_var))
    n = len(logits_inv)
    losses = []
    for j in range(n_interventions):
        perm = np.arange(n) if j == 0 else rng.permutation(n)
        combined = mul(inv, gather_rows(gate, perm))
        losses.append(cross_entropy_logits(combined, labels))
    total = mean_scalars(losses)
    if penalty > 0 and len(losses) > 1:
        total = add(total, scale(variance_over_set(losses), penalty))
    return total, [l.item() for l in losses]


def variant_branch_loss(logits_var: Sequence[Tensor], labels: Sequence[int]) -> Tensor:
    """Plain mean cross-entropy of the variant branch against the labels."""
    return cross_entropy_logits(stack_rows(logits_var), labels)


@dataclass
class LossBreakdown:
    """All objective terms for one optimizer step, recorded for logging.

    ``total`` always equals intervention + alpha_s * variant +
    alpha_e * entropy + alpha_pse * encoding under the weights used.
    """

    intervention: float
    variant: float
    entropy: float
    encoding: float
    total: float
    per_intervention: list[float] = field(default_factory=list)


def total_objective(l_intervention: Tensor, l_variant: Tensor, l_entropy: Tensor,
                    l_encoding: Tensor | None, alpha_s: float, alpha_e: float,
                    alpha_pse: float) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the four objective terms.

    ``l_encoding`` may be None when the subgraph encoder is disabled; its
    term is then dropped and logged as zero.
    """
    if alpha_s < 0 or alpha_e < 0 or alpha_pse < 0:
        raise ConfigError("objective weights must be nonnegative")
    total = add(l_intervention, scale(l_variant, alpha_s))
    total = add(total, scale(l_entropy, alpha_e))
    if l_encoding is not None:
        total = add(total, scale(l_encoding, alpha_pse))
    breakdown = LossBreakdown(
        intervention=l_intervention.item(),
        variant=l_variant.item(),
        entropy=l_entropy.item(),
        encoding=0.0 if l_encoding is None else l_encoding.item(),
        total=total.item(),
    )
    return total, breakdown
