"""Weighted directed graphs, graph Laplacians, and dense matrix primitives.

Convention: ``weights[i, j] > 0`` iff the edge (j, i) exists, i.e. information
flows from agent j to agent i. The Laplacian is L = D - W with D = diag(W 1),
so every Laplacian row sums to zero and L 1 = 0.
"""

from __future__ import annotations

import json
from dataclasses import InitVar, dataclass
from pathlib import Path

import numpy as np

DEFAULT_ROW_SUM_TOL = 1e-12


def _readonly(a) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DirectedGraph:
    """Weighted digraph on N >= 1 nodes with nonnegative weights, no self-loops."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = _readonly(self.weights)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight matrix must be square, got shape {w.shape}")
        if w.shape[0] < 1:
            raise ValueError("graph needs at least one node")
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(np.diag(w) != 0):
            raise ValueError("self-loops are not allowed (diagonal must be zero)")
        object.__setattr__(self, "weights", w)

    @property
    def node_count(self) -> int:
        return self.weights.shape[0]

    def successors(self, j: int) -> np.ndarray:
        """Nodes i with an edge (j, i), i.e. reachable from j in one hop."""
        return np.flatnonzero(self.weights[:, j] > 0)


@dataclass(frozen=True)
class LaplacianMatrix:
    """N x N Laplacian: zero row sums, nonpositive off-diagonal entries.

    ``source`` records provenance: "derived-from-graph" when built by
    :func:`laplacian_from_graph`, "explicit" for user-supplied matrices.
    """

    entries: np.ndarray
    source: str = "explicit"
    row_sum_tol: InitVar[float] = DEFAULT_ROW_SUM_TOL

    def __post_init__(self, row_sum_tol: float) -> None:
        m = _readonly(self.entries)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"Laplacian must be square, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("Laplacian entries must be finite")
        row_sums = m.sum(axis=1)
        if np.max(np.abs(row_sums)) > row_sum_tol:
            raise ValueError(
                f"Laplacian rows must sum to zero within {row_sum_tol:g}, "
                f"worst residual {np.max(np.abs(row_sums)):g}"
            )
        off_diag = m - np.diag(np.diag(m))
        if np.any(off_diag > 0):
            raise ValueError("off-diagonal Laplacian entries must be <= 0")
        if np.any(np.diag(m) < 0):
            raise ValueError("diagonal Laplacian entries must be >= 0")
        object.__setattr__(self, "entries", m)

    @property
    def node_count(self) -> int:
        return self.entries.shape[0]

    @property
    def leader_mask(self) -> np.ndarray:
        """Boolean mask of nodes with no incoming edges (all-zero rows)."""
        return ~np.any(self.entries != 0, axis=1)


def laplacian_from_graph(g: DirectedGraph) -> LaplacianMatrix:
    """L = diag(W 1) - W for the graph's weight matrix W."""
    w = g.weights
    entries = np.diag(w.sum(axis=1)) - w
    return LaplacianMatrix(entries, source="derived-from-graph")


def path_ahead_graph(n_agents: int) -> DirectedGraph:
    """Directed path where each agent observes only its predecessor."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    w = np.zeros((n_agents, n_agents))
    for i in range(1, n_agents):
        w[i, i - 1] = 1.0
    return DirectedGraph(w)


def path_ahead_laplacian(n_agents: int) -> LaplacianMatrix:
    """Laplacian of the predecessor-following path: zero first row, then
    row i carrying (-1, +1) at columns (i-1, i)."""
    return laplacian_from_graph(path_ahead_graph(n_agents))


def graph_from_laplacian(lap: LaplacianMatrix) -> DirectedGraph:
    """Recover the weighted digraph whose Laplacian is ``lap``."""
    m = lap.entries
    w = -(m - np.diag(np.diag(m)))
    return DirectedGraph(w)


def has_directed_spanning_tree(g: DirectedGraph) -> bool:
    """True iff some root node reaches every other node along directed edges.

    Decided by plain graph search from each candidate root; no eigenvalues
    involved, so the answer is exact.
    """
    n = g.node_count
    succ = [g.successors(j) for j in range(n)]
    for root in range(n):
        seen = np.zeros(n, dtype=bool)
        seen[root] = True
        stack = [root]
        count = 1
        while stack:
            j = stack.pop()
            for i in succ[j]:
                if not seen[i]:
                    seen[i] = True
                    count += 1
                    stack.append(int(i))
        if count == n:
            return True
    return False


def kron(a, b) -> np.ndarray:
    """Kronecker product with blocks a_ij * b."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def inf_norm(m) -> float:
    """Vector max-abs entry; for matrices the induced norm max row abs sum."""
    a = np.asarray(m, dtype=float)
    if a.ndim <= 1:
        return float(np.max(np.abs(a))) if a.size else 0.0
    return float(np.max(np.sum(np.abs(a), axis=1)))


def graph_from_json(doc: dict) -> DirectedGraph:
    """Build a graph from {"n": int, "edges": [[from, to, weight], ...]} or
    {"preset": "path_ahead", "n": int}. Node indices are 0-based."""
    if "preset" in doc:
        preset = doc["preset"]
        if preset != "path_ahead":
            raise ValueError(f"unknown graph preset {preset!r}")
        return path_ahead_graph(int(doc["n"]))
    n = int(doc["n"])
    w = np.zeros((n, n))
    for edge in doc.get("edges", []):
        if len(edge) == 2:
            src, dst = edge
            weight = 1.0
        else:
            src, dst, weight = edge
        src, dst = int(src), int(dst)
        if not (0 <= src < n and 0 <= dst < n):
            raise ValueError(f"edge ({src}, {dst}) out of range for n={n}")
        if src == dst:
            raise ValueError("self-loops are not allowed")
        if weight <= 0:
            raise ValueError("edge weights must be positive")
        w[dst, src] = float(weight)
    return DirectedGraph(w)


def load_graph(path) -> DirectedGraph:
    with open(Path(path), encoding="utf-8") as fh:
        return graph_from_json(json.load(fh))
