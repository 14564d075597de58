"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every operation records its parents and a
backward closure on the output node, so the tape is rebuilt on each forward
pass. Gradients flow only through nodes created from at least one
gradient-requiring input; everything else is treated as a constant and is
pruned from the tape. A backward pass propagates pass-local adjoints and
persists them into ``grad`` on leaf tensors only, so repeated calls without a
reset accumulate cleanly.

Broadcasting is deliberately restricted to scalar-tensor arithmetic and
row-vector bias addition. All model math fits those patterns and the
restriction turns silent shape bugs into immediate errors.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError, UsageError

_node_ids = itertools.count()

#: Entries of probability rows may undershoot zero by at most this much.
_PROB_NEG_TOL = 1e-9
#: Probability rows must sum to one within this tolerance.
_PROB_SUM_TOL = 1e-6


class Tensor:
    """A dense float64 array, optionally participating in the gradient tape.

    ``grad`` is populated on leaf tensors by :func:`backward` and accumulates
    across passes until reset. ``tape_id`` is a monotonically increasing
    identifier assigned to tape participants; it doubles as a creation-order
    witness for the topological-order invariant.
    """

    __slots__ = ("data", "grad", "tape_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.tape_id = next(_node_ids) if requires_grad else None

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"]) -> "Tensor":
        live = tuple(p for p in parents if p.tape_id is not None)
        out = Tensor(data, requires_grad=bool(live))
        out._parents = live
        return out

    @property
    def requires_grad(self) -> bool:
        return self.tape_id is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def trace(root: Tensor) -> list[Tensor]:
    """Topologically ordered tape reachable from ``root`` (parents first)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every reachable leaf.

    Intermediate nodes carry adjoints only for the duration of the pass;
    repeated calls without resetting leaf grads keep accumulating.
    """
    if root.data.size != 1:
        raise UsageError(f"backward root must be scalar, got shape {root.data.shape}")
    if root.tape_id is None:
        raise UsageError("backward root is not connected to the gradient tape")

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owned: set[int] = {id(root)}

    def emit(node: Tensor, g: np.ndarray) -> None:
        key = id(node)
        cur = adjoint.get(key)
        if cur is None:
            adjoint[key] = g
        elif key in owned:
            cur += g
        else:
            # first stored array may be borrowed from a producer; never mutate it
            adjoint[key] = cur + g
            owned.add(key)

    for node in reversed(trace(root)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g, emit)
        elif not node._parents:
            # leaf: persist, copying so no leaf ever aliases another adjoint
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g


# -- arithmetic -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out = Tensor._result(a.data @ b.data, (a, b))
    if out.requires_grad:
        def _bw(g, emit):
            if a.tape_id is not None:
                emit(a, g @ b.data.T)
            if b.tape_id is not None:
                emit(b, a.data.T @ g)
        out._backward = _bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b with a row-vector bias, fused into one tape node."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} @ {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias shape {b.data.shape} vs width {w.data.shape[1]}")
    out = Tensor._result(x.data @ w.data + b.data, (x, w, b))
    if out.requires_grad:
        def _bw(g, emit):
            if x.tape_id is not None:
                emit(x, g @ w.data.T)
            if w.tape_id is not None:
                emit(w, x.data.T @ g)
            if b.tape_id is not None:
                emit(b, g.sum(axis=0))
        out._backward = _bw
    return out


def vecmat(v: Tensor, w: Tensor) -> Tensor:
    """Vector-matrix product: (d,) @ (d, c) -> (c,)."""
    v, w = _as_tensor(v), _as_tensor(w)
    if v.data.ndim != 1 or w.data.ndim != 2 or v.data.shape[0] != w.data.shape[0]:
        raise ShapeError(f"vecmat: incompatible shapes {v.data.shape} and {w.data.shape}")
    out = Tensor._result(v.data @ w.data, (v, w))
    if out.requires_grad:
        def _bw(g, emit):
            if v.tape_id is not None:
                emit(v, w.data @ g)
            if w.tape_id is not None:
                emit(w, np.outer(v.data, g))
        out._backward = _bw
    return out


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.data.shape}")
    out = Tensor._result(x.data.T.copy(), (x,))
    if out.requires_grad:
        out._backward = lambda g, emit: emit(x, g.T.copy())
    return out


def _add_kind(a: np.ndarray, b: np.ndarray, opname: str) -> str:
    """Classify a +/- operand pair as same-shape, matrix-plus-row-bias, or
    tensor-plus-scalar; anything else is a shape error."""
    if a.shape == b.shape:
        return "same"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "bias"
    if b.ndim == 0:
        return "scalar"
    raise ShapeError(f"{opname}: unsupported operand shapes {a.shape} and {b.shape}")


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _add_kind(a.data, b.data, "add")
    out = Tensor._result(a.data + b.data, (a, b))
    if out.requires_grad:
        def _bw(g, emit):
            if a.tape_id is not None:
                emit(a, g)
            if b.tape_id is not None:
                if kind == "same":
                    emit(b, g.copy())
                elif kind == "bias":
                    emit(b, g.sum(axis=0))
                else:
                    emit(b, np.asarray(g.sum()))
        out._backward = _bw
    return out


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    kind = _add_kind(a.data, b.data, "sub")
    out = Tensor._result(a.data - b.data, (a, b))
    if out.requires_grad:
        def _bw(g, emit):
            if a.tape_id is not None:
                emit(a, g)
            if b.tape_id is not None:
                if kind == "same":
                    emit(b, -g)
                elif kind == "bias":
                    emit(b, -g.sum(axis=0))
                else:
                    emit(b, np.asarray(-g.sum()))
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; one operand may be a 0-d scalar tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"mul: operand shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor._result(a.data * b.data, (a, b))
    if out.requires_grad:
        def _bw(g, emit):
            if a.tape_id is not None:
                ga = g * b.data
                emit(a, np.asarray(ga.sum()) if a.data.ndim == 0 and ga.ndim > 0 else ga)
            if b.tape_id is not None:
                gb = g * a.data
                emit(b, np.asarray(gb.sum()) if b.data.ndim == 0 and gb.ndim > 0 else gb)
        out._backward = _bw
    return out


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    out = Tensor._result(x.data * c, (x,))
    if out.requires_grad:
        out._backward = lambda g, emit: emit(x, g * c)
    return out


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    # piecewise form avoids exp overflow for large |x|
    s = np.where(d >= 0,
                 1.0 / (1.0 + np.exp(-np.clip(d, 0, None))),
                 np.exp(np.clip(d, None, 0)) / (1.0 + np.exp(np.clip(d, None, 0))))
    out = Tensor._result(s, (x,))
    if out.requires_grad:
        out._backward = lambda g, emit: emit(x, g * s * (1.0 - s))
    return out


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor._result(np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:
        out._backward = lambda g, emit: emit(x, g * (x.data > 0))
    return out


def powf(x: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent; the base must be positive
    unless the exponent is a nonnegative integer."""
    x = _as_tensor(x)
    exponent = float(exponent)
    if (exponent != int(exponent) or exponent < 0) and np.any(x.data <= 0):
        raise DomainError(f"powf: non-positive base with exponent {exponent}")
    out = Tensor._result(x.data ** exponent, (x,))
    if out.requires_grad:
        out._backward = lambda g, emit: emit(x, g * exponent * x.data ** (exponent - 1.0))
    return out


def rowsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"rowsum expects a matrix, got {x.data.shape}")
    out = Tensor._result(x.data.sum(axis=1), (x,))
    if out.requires_grad:
        out._backward = lambda g, emit: emit(
            x, np.repeat(g[:, None], x.data.shape[1], axis=1))
    return out


def outer(u: Tensor, v: Tensor) -> Tensor:
    u, v = _as_tensor(u), _as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ShapeError(f"outer expects vectors, got {u.data.shape} and {v.data.shape}")
    out = Tensor._result(np.outer(u.data, v.data), (u, v))
    if out.requires_grad:
        def _bw(g, emit):
            if u.tape_id is not None:
                emit(u, g @ v.data)
            if v.tape_id is not None:
                emit(v, g.T @ u.data)
        out._backward = _bw
    return out


def mean_pool_rows(x: Tensor) -> Tensor:
    """Mean over rows: (n, d) -> (d,); a vector (n,) pools to a scalar."""
    x = _as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"mean_pool_rows expects 1-d or 2-d input, got {x.data.shape}")
    n = x.data.shape[0]
    if n == 0:
        raise ShapeError("mean_pool_rows: empty input")
    out = Tensor._result(x.data.mean(axis=0), (x,))
    if out.requires_grad:
        if x.data.ndim == 2:
            out._backward = lambda g, emit: emit(x, np.repeat(g[None, :] / n, n, axis=0))
        else:
            out._backward = lambda g, emit: emit(x, np.full(n, g.item() / n))
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, but the backward pass never crosses this node."""
    x = _as_tensor(x)
    return Tensor(x.data.copy())


# -- softmax / entropy / losses ----------------------------------------------


def softmax_rows(x: Tensor, t: float = 1.0) -> Tensor:
    """Row-wise softmax of x / t, computed with per-row max subtraction.

    t = 1 is the plain softmax; smaller t sharpens every row while keeping
    its ranking.
    """
    x = _as_tensor(x)
    t = float(t)
    if t <= 0:
        raise DomainError(f"softmax temperature must be positive, got {t}")
    d = np.atleast_2d(x.data)
    z = d / t
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p2 = ez / ez.sum(axis=1, keepdims=True)
    p = p2.reshape(x.data.shape)
    out = Tensor._result(p, (x,))
    if out.requires_grad:
        def _bw(g, emit):
            g2 = np.atleast_2d(g)
            inner = (g2 * p2).sum(axis=1, keepdims=True)
            emit(x, ((p2 * (g2 - inner)) / t).reshape(x.data.shape))
        out._backward = _bw
    return out


def _check_prob_rows(p: np.ndarray) -> None:
    if np.any(p < -_PROB_NEG_TOL):
        raise DomainError(f"probability rows contain negative entries (min {p.min():.3e})")
    sums = np.atleast_2d(p).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > _PROB_SUM_TOL):
        worst = sums[np.argmax(np.abs(sums - 1.0))]
        raise DomainError(f"probability rows must sum to 1, worst row sums to {worst!r}")


def row_entropy(p: Tensor) -> Tensor:
    """Natural-log Shannon entropy of each row; 0 log 0 counts as 0."""
    p = _as_tensor(p)
    _check_prob_rows(p.data)
    d = np.atleast_2d(np.clip(p.data, 0.0, None))
    logs = np.log(np.where(d > 0.0, d, 1.0))
    h = -(d * logs).sum(axis=1)
    out = Tensor._result(h.reshape(()) if p.data.ndim == 1 else h, (p,))
    if out.requires_grad:
        def _bw(g, emit):
            gcol = np.atleast_1d(g).reshape(-1, 1)
            emit(p, (-(logs + 1.0) * gcol).reshape(p.data.shape))
        out._backward = _bw
    return out


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of raw logits against integer class labels.

    Accepts a single logit vector with an int label, or a (batch, classes)
    matrix with a label per row.
    """
    logits = _as_tensor(logits)
    d = np.atleast_2d(logits.data)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != d.shape[0]:
        raise ShapeError(f"cross_entropy_logits: {d.shape[0]} rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= d.shape[1]):
        raise DomainError(f"labels out of range [0, {d.shape[1]})")
    zmax = d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(d - zmax).sum(axis=1)) + zmax[:, 0]
    picked = d[np.arange(d.shape[0]), y]
    out = Tensor._result(np.asarray((lse - picked).mean()), (logits,))
    if out.requires_grad:
        def _bw(g, emit):
            p = np.exp(d - zmax)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(d.shape[0]), y] -= 1.0
            emit(logits, (g.item() * p / d.shape[0]).reshape(logits.data.shape))
        out._backward = _bw
    return out


def abs_loss(pred: Tensor, target: Tensor) -> Tensor:
    """L1 distance summed over features and averaged over rows."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"abs_loss: shapes differ: {pred.data.shape} vs {target.data.shape}")
    n = pred.data.shape[0] if pred.data.ndim > 0 else 1
    diff = pred.data - target.data
    out = Tensor._result(np.asarray(np.abs(diff).sum() / n), (pred, target))
    if out.requires_grad:
        def _bw(g, emit):
            s = g.item() * np.sign(diff) / n
            if pred.tape_id is not None:
                emit(pred, s)
            if target.tape_id is not None:
                emit(target, -s)
        out._backward = _bw
    return out


# -- batch assembly -----------------------------------------------------------


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix, one row per input."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack_rows: empty input")
    if tensors[0].data.ndim != 1 or any(t.data.shape != tensors[0].data.shape for t in tensors):
        raise ShapeError("stack_rows expects vectors of identical length")
    out = Tensor._result(np.stack([t.data for t in tensors]), tensors)
    if out.requires_grad:
        def _bw(g, emit):
            for i, t in enumerate(tensors):
                if t.tape_id is not None:
                    emit(t, g[i].copy())
        out._backward = _bw
    return out


def gather_rows(x: Tensor, index: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got {x.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.data.shape[0]} rows")
    out = Tensor._result(x.data[idx], (x,))
    if out.requires_grad:
        def _bw(g, emit):
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            emit(x, acc)
        out._backward = _bw
    return out


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along the feature axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors or any(t.data.ndim != 2 for t in tensors):
        raise ShapeError("concat_cols expects matrices")
    rows = tensors[0].data.shape[0]
    if any(t.data.shape[0] != rows for t in tensors):
        raise ShapeError("concat_cols: row counts differ")
    out = Tensor._result(np.concatenate([t.data for t in tensors], axis=1), tensors)
    if out.requires_grad:
        splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

        def _bw(g, emit):
            for t, piece in zip(tensors, np.split(g, splits, axis=1)):
                if t.tape_id is not None:
                    emit(t, piece.copy())
        out._backward = _bw
    return out


def mean_scalars(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors or any(t.data.size != 1 for t in tensors):
        raise ShapeError("mean_scalars expects a non-empty sequence of scalars")
    m = len(tensors)
    out = Tensor._result(np.asarray(sum(t.data.item() for t in tensors) / m), tensors)
    if out.requires_grad:
        def _bw(g, emit):
            share = g.item() / m
            for t in tensors:
                if t.tape_id is not None:
                    emit(t, np.full(t.data.shape, share))
        out._backward = _bw
    return out


def variance_over_set(tensors: Sequence[Tensor]) -> Tensor:
    """Population variance of a set of scalars (divide by the set size)."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors or any(t.data.size != 1 for t in tensors):
        raise ShapeError("variance_over_set expects a non-empty sequence of scalars")
    values = np.array([t.data.item() for t in tensors])
    mean = values.mean()
    out = Tensor._result(np.asarray(((values - mean) ** 2).mean()), tensors)
    if out.requires_grad:
        def _bw(g, emit):
            coeff = 2.0 * g.item() / len(tensors)
            for t, v in zip(tensors, values):
                if t.tape_id is not None:
                    emit(t, np.full(t.data.shape, coeff * (v - mean)))
        out._backward = _bw
    return out


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row to zero mean / unit variance, then apply a learned
    per-feature scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows expects a matrix, got {x.data.shape}")
    if gain.data.shape != (x.data.shape[1],) or bias.data.shape != (x.data.shape[1],):
        raise ShapeError("layer_norm_rows: gain/bias must be feature-width vectors")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor._result(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def _bw(g, emit):
            if bias.tape_id is not None:
                emit(bias, g.sum(axis=0))
            if gain.tape_id is not None:
                emit(gain, (g * xhat).sum(axis=0))
            if x.tape_id is not None:
                gg = g * gain.data
                m1 = gg.mean(axis=1, keepdims=True)
                m2 = (gg * xhat).mean(axis=1, keepdims=True)
                emit(x, (gg - m1 - xhat * m2) * inv)
        out._backward = _bw
    return out


# -- optimizer ----------------------------------------------------------------


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: dict,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """One Adam update with bias correction, applied to ``params`` in place.

    ``state`` holds first/second moment arrays and the step counter; pass an
    empty dict on the first call.
    """
    if lr <= 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param/grad shape mismatch at index {i}: {p.shape} vs {g.shape}")
        m = state["m"][i]
        v = state["v"][i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


class Adam:
    """Convenience wrapper binding :func:`adam_step` to a set of tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
