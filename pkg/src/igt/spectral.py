"""Spectral positional encodings of the original, unmasked graph.

Eigenvectors of the symmetric normalized Laplacian with the smallest nonzero
eigenvalues serve as the fixed regression target for the learned subgraph
encoder. The eigensolver is a cyclic Jacobi rotation scheme, JIT-compiled
with numba when available; without numba the same code runs as plain
NumPy and is merely slower.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

#: Eigenvalues below this are treated as the zero eigenvalue of a connected graph.
_ZERO_EIGENVALUE_TOL = 1e-9
#: Eigenvalue gaps below this count as degenerate for the ordering tie-break.
_DEGENERACY_TOL = 1e-8


@dataclass
class LapPE:
    """Per-node spectral coordinates: unit-norm, mutually orthogonal columns,
    zero-padded when the graph has fewer than the requested number of
    nonzero-eigenvalue eigenvectors."""

    vectors: np.ndarray          # (n, k)
    eigenvalues: np.ndarray      # (k,), zero entries mark padding columns
    n_padding: int


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """I - D^{-1/2} A D^{-1/2} for a symmetric 0/1 adjacency without isolates."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError(f"adjacency must be square, got {a.shape}")
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        raise DomainError(f"isolated node(s) at indices {np.flatnonzero(deg == 0).tolist()}")
    dinv = 1.0 / np.sqrt(deg)
    lap = -a * np.outer(dinv, dinv)
    np.fill_diagonal(lap, lap.diagonal() + 1.0)
    return lap


@njit(cache=True)
def _jacobi_sweeps(a: np.ndarray, v: np.ndarray, max_sweeps: int, off_tol: float) -> int:
    """Cyclic Jacobi rotations in place; returns the number of sweeps used."""
    n = a.shape[0]
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) > off:
                    off = abs(a[p, q])
        if off < off_tol:
            return sweep
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < off_tol * 1e-2:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for i in range(n):
                    aip = a[i, p]
                    aiq = a[i, q]
                    a[i, p] = c * aip - s * aiq
                    a[i, q] = s * aip + c * aiq
                for i in range(n):
                    api = a[p, i]
                    aqi = a[q, i]
                    a[p, i] = c * api - s * aqi
                    a[q, i] = s * api + c * aqi
                for i in range(n):
                    vip = v[i, p]
                    viq = v[i, q]
                    v[i, p] = c * vip - s * viq
                    v[i, q] = s * vip + c * viq
    return max_sweeps


def symmetric_eig(matrix: np.ndarray, symmetry_tol: float = 1e-10,
                  max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a dense symmetric matrix via cyclic Jacobi.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError(f"matrix must be square, got {m.shape}")
    asym = np.abs(m - m.T).max() if m.size else 0.0
    if asym > symmetry_tol:
        raise DomainError(f"matrix is not symmetric (max |m - m^T| = {asym:.3e})")
    n = m.shape[0]
    a = (m + m.T) / 2.0
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1.0)
    _jacobi_sweeps(a, v, max_sweeps, off_tol=1e-14 * scale)
    w = a.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its first entry of nonnegligible magnitude is positive."""
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def _order_degenerate_blocks(values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """Within each near-degenerate eigenvalue block, order columns by the
    lexicographic rank of their rounded entries so repeated runs agree."""
    vectors = vectors.copy()
    start = 0
    k = values.shape[0]
    while start < k:
        stop = start + 1
        while stop < k and values[stop] - values[stop - 1] < _DEGENERACY_TOL:
            stop += 1
        if stop - start > 1:
            block = vectors[:, start:stop]
            keys = [tuple(np.round(block[:, j], 8)) for j in range(block.shape[1])]
            order = sorted(range(block.shape[1]), key=lambda j: keys[j])
            vectors[:, start:stop] = block[:, order]
        start = stop
    return vectors


def lappe(adjacency: np.ndarray, k: int) -> LapPE:
    """Eigenvectors for the k smallest nonzero Laplacian eigenvalues.

    Deterministic for a fixed input: signs are fixed and near-degenerate
    blocks are ordered by a value-based tie-break. Missing columns (when the
    graph has fewer than k nonzero eigenvalues) are zero-padded.
    """
    if k < 1:
        raise DomainError(f"k must be at least 1, got {k}")
    lap = normalized_laplacian(adjacency)
    values, vectors = symmetric_eig(lap)
    nonzero = values > _ZERO_EIGENVALUE_TOL
    values = values[nonzero]
    vectors = vectors[:, nonzero]
    take = min(k, values.shape[0])
    values = values[:take]
    vectors = _fix_signs(_order_degenerate_blocks(values, vectors[:, :take]))
    n = lap.shape[0]
    out = np.zeros((n, k))
    out_values = np.zeros(k)
    out[:, :take] = vectors
    out_values[:take] = values
    return LapPE(vectors=out, eigenvalues=out_values, n_padding=k - take)
