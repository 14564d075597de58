"""Invariant/variant subgraph disentangler.

A stack of hybrid transformer layers (dense multi-head self-attention plus a
message-passing branch) produces node representations. A single-head
complementary attention block then scores every node pair once; the positive
softmax routes signal toward the invariant branch and the negated softmax
toward the variant branch, and the sigmoid of the same scores splits the
adjacency into two complementary soft subgraphs.

The multi-head attention and the degree-normalized propagation are fused
tape operations with hand-derived backward passes; both are covered by the
finite-difference gradient suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .tensor import (Tensor, add, linear, matmul, mean_pool_rows, mul, neg, relu,
                     row_entropy, scale, sigmoid, softmax_rows, layer_norm_rows,
                     transpose)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class MlpParams:
    """Two fully connected layers with a ReLU between them."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_mlp(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> MlpParams:
    return MlpParams(w1=glorot(rng, d_in, d_hidden), b1=zeros_param(d_hidden),
                     w2=glorot(rng, d_hidden, d_out), b2=zeros_param(d_out))


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2)


@dataclass
class AttentionParams:
    """Query/key/value projections (heads side by side) plus output projection."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    n_heads: int


def init_attention(rng: np.random.Generator, d: int, heads: int) -> AttentionParams:
    if d % heads != 0:
        raise DomainError(f"width {d} not divisible by {heads} heads")
    return AttentionParams(wq=glorot(rng, d, d), wk=glorot(rng, d, d),
                           wv=glorot(rng, d, d), wo=glorot(rng, d, d),
                           bo=zeros_param(d), n_heads=heads)


def multi_head_attention(z: Tensor, p: AttentionParams) -> Tensor:
    """Dense self-attention over all node pairs, one softmax row per head.

    Fused into a single tape node; each head works on its own width-d/heads
    slice of the projections.
    """
    zd = z.data
    n, d = zd.shape
    h = p.n_heads
    dk = d // h
    inv_sqrt = 1.0 / math.sqrt(dk)
    q = (zd @ p.wq.data).reshape(n, h, dk)
    k = (zd @ p.wk.data).reshape(n, h, dk)
    v = (zd @ p.wv.data).reshape(n, h, dk)
    logits = np.einsum("nhk,mhk->hnm", q, k) * inv_sqrt
    logits -= logits.max(axis=2, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=2, keepdims=True)
    mixed = np.einsum("hnm,mhk->nhk", attn, v).reshape(n, d)
    out = Tensor._result(mixed @ p.wo.data + p.bo.data, (z, p.wq, p.wk, p.wv, p.wo, p.bo))
    if out.requires_grad:
        def _bw(g, emit):
            if p.bo.tape_id is not None:
                emit(p.bo, g.sum(axis=0))
            if p.wo.tape_id is not None:
                emit(p.wo, mixed.T @ g)
            g_mixed = (g @ p.wo.data.T).reshape(n, h, dk)
            g_attn = np.einsum("nhk,mhk->hnm", g_mixed, v)
            g_v = np.einsum("hnm,nhk->mhk", attn, g_mixed)
            inner = (g_attn * attn).sum(axis=2, keepdims=True)
            g_logits = attn * (g_attn - inner) * inv_sqrt
            g_q = np.einsum("hnm,mhk->nhk", g_logits, k).reshape(n, d)
            g_k = np.einsum("hnm,nhk->mhk", g_logits, q).reshape(n, d)
            g_v = g_v.reshape(n, d)
            if p.wq.tape_id is not None:
                emit(p.wq, zd.T @ g_q)
            if p.wk.tape_id is not None:
                emit(p.wk, zd.T @ g_k)
            if p.wv.tape_id is not None:
                emit(p.wv, zd.T @ g_v)
            if z.tape_id is not None:
                emit(z, g_q @ p.wq.data.T + g_k @ p.wk.data.T + g_v @ p.wv.data.T)
        out._backward = _bw
    return out


def normalized_propagate(adj_soft: Tensor) -> Tensor:
    """Symmetrically degree-normalized adjacency with self-loops.

    Returns D^{-1/2} (A + I) D^{-1/2} where D holds the row sums of A + I;
    the self-loops keep every degree >= 1 for any nonnegative A. Fused with
    a hand-derived backward.
    """
    a = adj_soft.data
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise DomainError("adjacency weights must be nonnegative")
    n = a.shape[0]
    ap = a + np.eye(n)
    s = ap.sum(axis=1) ** -0.5
    prop = ap * np.outer(s, s)
    out = Tensor._result(prop, (adj_soft,))
    if out.requires_grad:
        def _bw(g, emit):
            gap = g * ap
            r = (gap * s[None, :]).sum(axis=1)
            c = (gap * s[:, None]).sum(axis=0)
            emit(adj_soft, g * np.outer(s, s) - 0.5 * (s ** 3 * (r + c))[:, None])
        out._backward = _bw
    return out


def attention_guided_mpnn(z: Tensor, adj_soft: Tensor, w: Tensor) -> Tensor:
    """One message-passing round over a nonnegative weighted adjacency."""
    return relu(matmul(matmul(normalized_propagate(adj_soft), z), w))


@dataclass
class HybridLayerParams:
    """One transformer block: attention and MPNN branches summed with a
    residual, then a feedforward with its own residual; both followed by
    per-node standardization with learned scale/shift."""

    attn: AttentionParams
    w_mp: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn: MlpParams


def init_hybrid_layer(rng: np.random.Generator, d: int, heads: int) -> HybridLayerParams:
    return HybridLayerParams(
        attn=init_attention(rng, d, heads),
        w_mp=glorot(rng, d, d),
        ln1_gain=ones_param(d), ln1_bias=zeros_param(d),
        ln2_gain=ones_param(d), ln2_bias=zeros_param(d),
        ffn=init_mlp(rng, d, 2 * d, d),
    )


def hybrid_layer(z: Tensor, propagate: Tensor, p: HybridLayerParams) -> Tensor:
    """GraphGPS-style block over a precomputed normalized propagation matrix."""
    mp = relu(matmul(matmul(propagate, z), p.w_mp))
    h = layer_norm_rows(add(add(z, multi_head_attention(z, p.attn)), mp),
                        p.ln1_gain, p.ln1_bias)
    return layer_norm_rows(add(h, mlp(h, p.ffn)), p.ln2_gain, p.ln2_bias)


@dataclass
class BackboneParams:
    w_in: Tensor
    b_in: Tensor
    layers: list[HybridLayerParams]


def init_backbone(rng: np.random.Generator, d_in: int, d: int, heads: int,
                  n_layers: int) -> BackboneParams:
    return BackboneParams(
        w_in=glorot(rng, d_in, d),
        b_in=zeros_param(d),
        layers=[init_hybrid_layer(rng, d, heads) for _ in range(n_layers)],
    )


def gt_backbone(x: Tensor, propagate: Tensor, p: BackboneParams) -> Tensor:
    """Project raw node features to model width, then apply the hybrid stack."""
    z = linear(x, p.w_in, p.b_in)
    for layer in p.layers:
        z = hybrid_layer(z, propagate, layer)
    return z


@dataclass
class ComplementaryAttentionParams:
    """Single-head projections; one head keeps the pairwise score matrix square."""

    wq: Tensor
    wk: Tensor
    wv: Tensor


def init_complementary(rng: np.random.Generator, d: int) -> ComplementaryAttentionParams:
    return ComplementaryAttentionParams(wq=glorot(rng, d, d), wk=glorot(rng, d, d),
                                        wv=glorot(rng, d, d))


def complementary_attention(z: Tensor, p: ComplementaryAttentionParams,
                            t: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
    """Two attention readouts from one score matrix and its negation.

    Within every row the two softmaxes rank node pairs in exactly opposite
    order, which is what routes signal to either the invariant or the
    variant branch. Returns (invariant readout, variant readout, logits).
    """
    d = p.wq.data.shape[1]
    q = matmul(z, p.wq)
    k = matmul(z, p.wk)
    v = matmul(z, p.wv)
    logits = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    z_inv = matmul(softmax_rows(logits, t), v)
    z_var = matmul(softmax_rows(neg(logits), t), v)
    return z_inv, z_var, logits


def _check_binary_adjacency(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"adjacency must be square, got {a.shape}")
    if np.any((a != 0.0) & (a != 1.0)):
        raise DomainError("adjacency must be 0/1")
    if np.any(a.diagonal() != 0.0):
        raise DomainError("adjacency must have a zero diagonal")
    if not np.array_equal(a, a.T):
        raise DomainError("adjacency must be symmetric")


def soft_mask(attn_logits: Tensor, adj: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Split a binary adjacency into complementary soft subgraph adjacencies.

    The invariant share of every edge is the sigmoid of its attention logit;
    the variant share is the complement, so the two adjacencies sum back to
    the input exactly.
    """
    _check_binary_adjacency(adj.data)
    mask = sigmoid(attn_logits)
    adj_inv = mul(mask, adj)
    adj_var = mul(add(scale(mask, -1.0), 1.0), adj)
    return mask, adj_inv, adj_var


def fuse(z_attn: Tensor, z_mpnn: Tensor, p: MlpParams) -> Tensor:
    """Merge the attention and message-passing views of one branch."""
    return mlp(add(z_attn, z_mpnn), p)


def entropy_loss(attn_logits: Tensor) -> Tensor:
    """Mean per-row entropy of the plain (t = 1) softmax of the logits.

    Minimizing this sharpens the attention rows; the value lies in
    [0, ln n] for an n-node graph.
    """
    return mean_pool_rows(row_entropy(softmax_rows(attn_logits, 1.0)))


@dataclass
class DisentanglerParams:
    backbone: BackboneParams
    comp: ComplementaryAttentionParams
    w_branch_mp: Tensor          # message-passing weight shared by both branches
    fuse_mlp: MlpParams          # fusion MLP shared by both branches


def init_disentangler(rng: np.random.Generator, d_in: int, d: int, heads: int,
                      n_layers: int) -> DisentanglerParams:
    return DisentanglerParams(
        backbone=init_backbone(rng, d_in, d, heads, n_layers),
        comp=init_complementary(rng, d),
        w_branch_mp=glorot(rng, d, d),
        fuse_mlp=init_mlp(rng, d, d, d),
    )


@dataclass
class DisentanglerOutput:
    """Everything downstream modules need from one disentangling pass."""

    attn_logits: Tensor     # (n, n) pairwise scores
    mask: Tensor            # sigmoid of the scores
    adj_inv: Tensor         # invariant soft adjacency
    adj_var: Tensor         # variant soft adjacency
    z_inv: Tensor           # fused invariant node representations
    z_var: Tensor           # fused variant node representations
    row_entropies: Tensor   # entropy of each t=1 softmax row of the scores


def disentangle(x: Tensor, adj: Tensor, propagate: Tensor, p: DisentanglerParams,
                t: float = 1.0) -> DisentanglerOutput:
    """Full disentangling pass for one graph.

    ``propagate`` is the (constant) normalized propagation matrix of the full
    graph used by the backbone layers; the branch message passing builds its
    own differentiable propagation from the soft adjacencies.
    """
    z = gt_backbone(x, propagate, p.backbone)
    z_attn_inv, z_attn_var, logits = complementary_attention(z, p.comp, t)
    mask, adj_inv, adj_var = soft_mask(logits, adj)
    z_mp_inv = attention_guided_mpnn(z, adj_inv, p.w_branch_mp)
    z_mp_var = attention_guided_mpnn(z, adj_var, p.w_branch_mp)
    return DisentanglerOutput(
        attn_logits=logits,
        mask=mask,
        adj_inv=adj_inv,
        adj_var=adj_var,
        z_inv=fuse(z_attn_inv, z_mp_inv, p.fuse_mlp),
        z_var=fuse(z_attn_var, z_mp_var, p.fuse_mlp),
        row_entropies=row_entropy(softmax_rows(logits, 1.0)),
    )
