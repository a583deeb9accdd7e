"""Symmetric eigen-decomposition and the node features the model consumes.

Eigen-decompositions are LAPACK-backed (numpy.linalg.eigh). Outputs are
deterministic for a fixed input on a fixed platform; for degenerate
eigenspaces the returned basis is the solver's, i.e. deterministic but not
canonical across platforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import Graph, is_connected

SYMMETRY_TOL = 1e-9
ZERO_EIGENVALUE_TOL = 1e-8
LAP_PE_DIM = 4
RWPE_DIM = 20


@dataclass(frozen=True)
class EigenPairs:
    """Ascending eigenvalues with matching orthonormal eigenvector columns."""

    values: np.ndarray
    vectors: np.ndarray


@dataclass(frozen=True)
class NodeFeatures:
    lap_pe: np.ndarray  # (n, 4) f64
    rwpe: np.ndarray  # (n, 20) f64, entries in [0, 1]
    cycle_counts: np.ndarray  # (n, 3) int64: triangles, 4-cycles, 5-cycles per node
    graph_cycle_totals: np.ndarray  # (3,) int64

    def concat(self) -> np.ndarray:
        """All per-node columns stacked: (n, 27) f64."""
        return np.concatenate(
            [self.lap_pe, self.rwpe, self.cycle_counts.astype(np.float64)], axis=1
        )


def sym_normalized_laplacian(g: Graph) -> np.ndarray:
    """L = I - D^{-1/2} A D^{-1/2}; isolated nodes get diagonal 1, off-diagonal 0."""
    a = g.adjacency.astype(np.float64)
    d = a.sum(axis=1)
    inv_sqrt = np.where(d > 0, 1.0 / np.sqrt(np.maximum(d, 1.0)), 0.0)
    lap = -np.outer(inv_sqrt, inv_sqrt) * a
    np.fill_diagonal(lap, 1.0)
    return lap


def eigh(m: np.ndarray) -> EigenPairs:
    """Full spectrum of a symmetric matrix, eigenvalues ascending."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(1.0, float(np.abs(m).max()) if m.size else 1.0)
    if float(np.abs(m - m.T).max()) > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    values, vectors = np.linalg.eigh(m)
    return EigenPairs(values, vectors)


def _sign_fix_first(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Flip sign so the first entry with |v_i| > tol is positive."""
    for x in v:
        if abs(x) > tol:
            return v if x > 0 else -v
    return v


def _sign_fix_stable(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Sign rule that does not depend on node order: of v and -v, keep the one
    whose sorted entry multiset is lexicographically larger.

    When the multiset is symmetric under negation (the vector flips sign under
    some graph automorphism) no order-free rule can decide; fall back to the
    first-entry rule, which is then deterministic but representative-dependent.
    """
    diff = np.sort(v) - np.sort(-v)
    idx = np.flatnonzero(np.abs(diff) > tol)
    if idx.size:
        return v if diff[idx[0]] > 0 else -v
    return _sign_fix_first(v)


def fiedler_vector(g: Graph) -> np.ndarray:
    """Unit eigenvector of the second-smallest normalized-Laplacian eigenvalue.

    Sign is fixed so the first entry with magnitude > 1e-9 is positive. For a
    degenerate second eigenvalue the solver-order-first vector is returned
    (deterministic, not canonical).
    """
    if g.n < 2 or not is_connected(g):
        raise ValueError("Fiedler undefined")
    pairs = eigh(sym_normalized_laplacian(g))
    return _sign_fix_first(pairs.vectors[:, 1].copy())


def _per_node_cycle_counts(a: np.ndarray) -> np.ndarray:
    """Counts of triangle/4-cycle/5-cycle subgraphs through each node.

    Closed-walk power formulas with the degenerate (shorter) closed walks
    subtracted; exact integers for desk-scale n.
    """
    n = a.shape[0]
    d = a.sum(axis=1)
    a2 = a @ a
    a3 = a2 @ a
    a4 = a2 @ a2
    a5 = a3 @ a2
    tri = np.diag(a3) / 2.0
    c4 = (np.diag(a4) - d * d - a @ (d - 1.0)) / 2.0
    diag_a3 = np.diag(a3)
    c5 = (
        np.diag(a5)
        - a @ diag_a3
        - 2.0 * ((a * a2) @ d)
        + 3.0 * diag_a3
        - 2.0 * (d - 1.0) * diag_a3
    ) / 2.0
    counts = np.stack([tri, c4, c5], axis=1)
    out = np.rint(counts).astype(np.int64)
    if n and float(np.abs(counts - out).max()) > 1e-6:
        raise ArithmeticError("cycle counts failed to round to integers")
    return out


def node_features(g: Graph) -> NodeFeatures:
    """Laplacian PE, random-walk PE, and cycle counts for one graph.

    lap_pe columns are eigenvectors of the 4 smallest nonzero Laplacian
    eigenvalues (zero-padded when fewer exist); rows of isolated nodes are
    zeroed so featureless nodes stay featureless. Signs follow the
    permutation-invariant largest-entry rule.
    """
    n = g.n
    a = g.adjacency.astype(np.float64)
    d = a.sum(axis=1)
    isolated = d == 0

    lap_pe = np.zeros((n, LAP_PE_DIM))
    if n:
        pairs = eigh(sym_normalized_laplacian(g))
        nonzero = np.flatnonzero(pairs.values > ZERO_EIGENVALUE_TOL)
        for col, idx in enumerate(nonzero[:LAP_PE_DIM]):
            vec = _sign_fix_stable(pairs.vectors[:, idx].copy())
            vec[isolated] = 0.0
            lap_pe[:, col] = vec

    rwpe = np.zeros((n, RWPE_DIM))
    if n:
        with np.errstate(divide="ignore"):
            walk = a / np.where(d > 0, d, 1.0)[:, None]
        power = np.eye(n)
        for k in range(RWPE_DIM):
            power = power @ walk
            rwpe[:, k] = np.diag(power)

    counts = _per_node_cycle_counts(a) if n else np.zeros((0, 3), dtype=np.int64)
    totals = counts.sum(axis=0) // np.array([3, 4, 5]) if n else np.zeros(3, dtype=np.int64)
    return NodeFeatures(lap_pe, rwpe, counts, totals.astype(np.int64))
