"""Learnable kNN affinity graph over the vertices of one episode.

Vertex order is always ``(centroids | support | query)``. Edges are never
drawn between two centroids.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

DEGREE_FLOOR = 1e-12
B_RAW_INIT = 9.2


class GraphError(ArithmeticError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass
class ManifoldParams:
    """Learnable centroids plus unconstrained graph parameters.

    The effective pairwise scale is ``exp(g_raw)`` and the effective gate
    is ``sigmoid(b_raw)``; ``beta``, ``k_neighbors`` and ``tau`` are fixed.
    ``k_neighbors=None`` means the complete graph.
    """

    centroids: np.ndarray
    g_raw: np.ndarray
    b_raw: np.ndarray
    beta: float = 0.8
    k_neighbors: int | None = 20
    tau: float = 15.0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.k_neighbors is not None and self.k_neighbors < 1:
            raise ValueError("k_neighbors must be positive or None")

    @classmethod
    def initial(cls, centroids, n_vertices: int, **kw) -> ManifoldParams:
        """G = all ones, B just below one."""
        return cls(
            centroids=np.array(centroids, dtype=np.float64),
            g_raw=np.zeros((n_vertices, n_vertices)),
            b_raw=np.full((n_vertices, n_vertices), B_RAW_INIT),
            **kw,
        )

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.g_raw)

    @property
    def gate(self) -> np.ndarray:
        return sigmoid(self.b_raw)

    def copy(self) -> ManifoldParams:
        return replace(
            self,
            centroids=self.centroids.copy(),
            g_raw=self.g_raw.copy(),
            b_raw=self.b_raw.copy(),
        )


@dataclass(frozen=True)
class GraphState:
    edges: np.ndarray  # bool T x T, edges[i, j]: v_i in NN_k(v_j)
    sqdist: np.ndarray
    sigma2: float
    affinity: np.ndarray
    adjacency: np.ndarray
    raw_gate: np.ndarray  # sigmoid(b_raw)
    gate: np.ndarray  # symmetrized effective gate
    gated: np.ndarray
    degrees: np.ndarray  # floored row sums of ``gated``
    normalized: np.ndarray


def assemble_vertices(centroids, support, query) -> np.ndarray:
    blocks = [np.asarray(b, dtype=np.float64) for b in (centroids, support, query)]
    dims = {b.shape[0] for b in blocks}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch between blocks: {[b.shape for b in blocks]}")
    return np.concatenate(blocks, axis=1)


def pairwise_sqdist(V: np.ndarray) -> np.ndarray:
    gram = V.T @ V
    sq = np.diag(gram)
    out = sq[:, None] + sq[None, :] - 2.0 * gram
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 0.0)
    return np.maximum(out, 0.0)


def knn_edges(V: np.ndarray, k: int | None, n_centroids: int, sqdist=None) -> np.ndarray:
    """Boolean ``E`` with ``E[i, j]`` true iff v_i is among the k nearest
    neighbours of v_j (self excluded, ties to the lower index), minus
    centroid-centroid pairs. ``k=None`` gives every non-self pair.
    """
    T = V.shape[1]
    if sqdist is None:
        sqdist = pairwise_sqdist(V)
    if k is None:
        E = ~np.eye(T, dtype=bool)
    else:
        if k >= T:
            raise ValueError(f"k={k} must be smaller than the vertex count {T}")
        masked = sqdist.copy()
        np.fill_diagonal(masked, np.inf)
        # distances are symmetric, so row j ranks the candidates for column j;
        # the stable sort keeps the lower index on ties
        nearest = np.argsort(masked, axis=1, kind="stable")[:, :k]
        E = np.zeros((T, T), dtype=bool)
        E[nearest, np.arange(T)[:, None]] = True
    E[:n_centroids, :n_centroids] = False
    return E


def global_sigma2(V: np.ndarray, sqdist=None) -> float:
    """Population std of squared distances over ordered pairs i != j (1.0 if zero)."""
    T = V.shape[1]
    if T < 2:
        raise ValueError("need at least two vertices")
    if sqdist is None:
        sqdist = pairwise_sqdist(V)
    # the diagonal is zero, so full sums equal off-diagonal sums
    count = T * (T - 1)
    mean = sqdist.sum() / count
    var = np.sum((sqdist - mean) ** 2) - T * mean**2
    s = float(np.sqrt(max(var / count, 0.0)))
    return s if s > 0 and np.isfinite(s) else 1.0


def build_graph(
    V: np.ndarray, params: ManifoldParams, n_centroids: int, sigma2: float | None = None
) -> GraphState:
    """Build the gated, degree-normalized affinity graph for ``V``.

    ``sigma2`` overrides the global scale statistic; finite-difference
    checks pass the unperturbed value so it behaves as a constant.
    """
    sqdist = pairwise_sqdist(V)
    edges = knn_edges(V, params.k_neighbors, n_centroids, sqdist)
    if sigma2 is None:
        sigma2 = global_sigma2(V, sqdist)

    with np.errstate(all="ignore"):
        expo = np.where(edges, -sqdist / (params.scale * sigma2), 0.0)
        affinity = np.where(edges, np.exp(expo), 0.0)
    if not np.all(np.isfinite(affinity)):
        i, j = np.argwhere(~np.isfinite(affinity))[0]
        raise GraphError(f"non-finite affinity for vertex pair ({i}, {j})")

    adjacency = 0.5 * (affinity + affinity.T)
    B = params.gate
    gate = 0.5 * (B + B.T)
    gated = adjacency * gate
    degrees = np.maximum(gated.sum(axis=1), DEGREE_FLOOR)
    s = 1.0 / np.sqrt(degrees)
    normalized = gated * s[:, None] * s[None, :]
    return GraphState(
        edges=edges,
        sqdist=sqdist,
        sigma2=sigma2,
        affinity=affinity,
        adjacency=adjacency,
        raw_gate=B,
        gate=gate,
        gated=gated,
        degrees=degrees,
        normalized=normalized,
    )
