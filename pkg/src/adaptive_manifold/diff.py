"""Forward pass with a retained tape, and its exact reverse pass.

The chain is centroids/g/b -> affinity -> symmetrize -> gate -> degree
normalization -> linear solve -> softmax -> loss. The kNN edge set and the
global scale ``sigma2`` are held constant in the reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_solve

from . import losses
from .graph import DEGREE_FLOOR, GraphState, ManifoldParams, assemble_vertices, build_graph
from .losses import LossWeights, one_hot
from .propagate import ProbTriplet, class_softmax, label_matrix, label_propagate, propagation_factor

GROUPS = ("centroids", "g_raw", "b_raw")


@dataclass
class Tape:
    V: np.ndarray
    n_centroids: int
    n_support: int
    y_support: np.ndarray  # one-hot N x L
    params: ManifoldParams
    weights: LossWeights
    graph: GraphState
    factor: tuple
    probs: ProbTriplet
    loss: float

    @property
    def Z(self) -> np.ndarray:
        return self.probs.z


@dataclass
class GradPhi:
    d_centroids: np.ndarray
    d_g_raw: np.ndarray
    d_b_raw: np.ndarray

    def group(self, name: str) -> np.ndarray:
        return getattr(self, "d_" + name)


def forward(
    support: np.ndarray,
    support_labels,
    query: np.ndarray,
    params: ManifoldParams,
    weights: LossWeights,
    sigma2: float | None = None,
) -> Tape:
    """One pipeline pass on already pre-processed support/query vectors."""
    C = params.centroids
    N = C.shape[1]
    L = support.shape[1]
    V = assemble_vertices(C, support, query)
    T = V.shape[1]
    if params.g_raw.shape != (T, T) or params.b_raw.shape != (T, T):
        raise ValueError(f"graph parameters must be {T} x {T}")
    g = build_graph(V, params, N, sigma2=sigma2)
    factor = propagation_factor(g.normalized, params.beta)
    Z = label_propagate(label_matrix(N, T), g.normalized, params.beta, factor=factor)
    probs = class_softmax(Z, params.tau, L)
    y_s = one_hot(support_labels, N)
    loss = losses.total_loss(probs, y_s, weights)
    return Tape(V, N, L, y_s, params, weights, g, factor, probs, loss)


def backward(tape: Tape) -> GradPhi:
    """Gradient of ``tape.loss`` with respect to every parameter group."""
    if tape is None or tape.factor is None or tape.graph is None:
        raise ValueError("backward needs a completed forward tape")
    p, g, prm = tape.probs, tape.graph, tape.params
    N, L = tape.n_centroids, tape.n_support

    # loss -> P
    d_s, d_q = losses.total_loss_grad(p, tape.y_support, tape.weights)
    P = p.full
    dP = np.zeros_like(P)
    dP[:, N : N + L] = d_s
    dP[:, N + L :] = d_q

    # P -> Z (column softmax of tau * Z)
    dZ = prm.tau * P * (dP - np.sum(dP * P, axis=0, keepdims=True))

    # Z -> W_norm. With M = I - beta W_norm and Z = Y M^-1,
    # dZ = beta Z dW M^-1, so dW = beta Z^T X where X M^T = dZ, i.e. M X^T = dZ^T.
    Xt = lu_solve(tape.factor, dZ.T, trans=0)
    dWn = prm.beta * (tape.Z.T @ Xt.T)

    # W_norm = s_i s_j W_B[i, j], s = degrees^-1/2, degrees = rowsum(W_B)
    s = 1.0 / np.sqrt(g.degrees)
    dWB = dWn * s[:, None] * s[None, :]
    t = dWn * g.gated
    ds = t @ s + t.T @ s
    d_deg = np.where(g.degrees > DEGREE_FLOOR, -0.5 * ds * g.degrees**-1.5, 0.0)
    dWB += d_deg[:, None]

    # W_B = W * (B + B^T)/2, B = sigmoid(b_raw)
    dW = dWB * g.gate
    dgate = dWB * g.adjacency
    B = g.raw_gate
    d_b_raw = 0.5 * (dgate + dgate.T) * B * (1.0 - B)

    # W = (A + A^T)/2
    dA = np.where(g.edges, 0.5 * (dW + dW.T), 0.0)

    # a = exp(-q / (G sigma2)), G = exp(g_raw)
    G = prm.scale
    dexpo = dA * g.affinity
    d_g_raw = np.where(g.edges, dexpo * g.sqdist / (G * g.sigma2), 0.0)
    dq = np.where(g.edges, -dexpo / (G * g.sigma2), 0.0)

    # q_ij = |v_i - v_j|^2; only the centroid columns of V are parameters
    Qs = dq + dq.T
    dC = 2.0 * (tape.V[:, :N] * Qs[:N].sum(axis=1) - tape.V @ Qs[:, :N])

    return GradPhi(d_centroids=dC, d_g_raw=d_g_raw, d_b_raw=d_b_raw)


def central_difference(f, x: float, h: float) -> float:
    return (f(x + h) - f(x - h)) / (2.0 * h)


def perturbed(params: ManifoldParams, group: str, index, delta: float) -> ManifoldParams:
    out = params.copy()
    getattr(out, group)[index] += delta
    return out


def finite_diff_oracle(
    episode, params: ManifoldParams, weights: LossWeights, group: str, index, h: float = 1e-5,
    sigma2: float | None = None,
) -> float:
    """Central difference of the loss along one parameter coordinate.

    Everything is recomputed, kNN selection included. ``sigma2`` should be
    the unperturbed value so the scale statistic stays constant, as it is
    in :func:`backward`; by default it is taken from the base point.
    """
    if sigma2 is None:
        sigma2 = _base_sigma2(episode, params, weights)

    def loss_at(delta):
        prm = perturbed(params, group, index, delta)
        return forward(
            episode.support_vectors, episode.support_labels, episode.query_vectors,
            prm, weights, sigma2=sigma2,
        ).loss

    return central_difference(loss_at, 0.0, h)


def _base_sigma2(episode, params, weights):
    return forward(
        episode.support_vectors, episode.support_labels, episode.query_vectors, params, weights
    ).graph.sigma2


@dataclass
class GroupCheck:
    max_rel_err: float = 0.0
    checked: int = 0
    skipped: int = 0
    worst_index: tuple | None = None
    worst_fd: float = 0.0
    failed: int = 0  # coordinates at or above tol
    max_failed_fd: float = 0.0  # largest |FD| among them


def rel_err(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(numeric), floor)


def gradcheck(episode, params: ManifoldParams, weights: LossWeights, h: float = 1e-5,
              backward_fn=None, tol: float = 1e-4) -> dict[str, GroupCheck]:
    """Compare ``backward_fn`` against central differences on every coordinate
    of every parameter group.

    Coordinates whose +-h perturbation changes the kNN edge set are skipped.
    """
    args = (episode.support_vectors, episode.support_labels, episode.query_vectors)
    base = forward(*args, params, weights)
    grad = (backward_fn or backward)(base)
    report = {}
    for group in GROUPS:
        values = getattr(params, group)
        analytic = grad.group(group)
        res = GroupCheck()
        for index in np.ndindex(values.shape):
            plus = forward(*args, perturbed(params, group, index, h), weights, sigma2=base.graph.sigma2)
            minus = forward(*args, perturbed(params, group, index, -h), weights, sigma2=base.graph.sigma2)
            if group == "centroids" and not (
                np.array_equal(plus.graph.edges, base.graph.edges)
                and np.array_equal(minus.graph.edges, base.graph.edges)
            ):
                res.skipped += 1
                continue
            fd = (plus.loss - minus.loss) / (2.0 * h)
            res.checked += 1
            err = rel_err(analytic[index], fd)
            if err > res.max_rel_err or res.worst_index is None:
                res.max_rel_err, res.worst_index, res.worst_fd = err, index, fd
            if err >= tol:
                res.failed += 1
                res.max_failed_fd = max(res.max_failed_fd, abs(fd))
        report[group] = res
    return report


def random_case(seed: int, index: int, dim: int = 8, n_way: int = 5, k_shot: int = 1,
                max_vertices: int = 20):
    """A small randomized (episode, params, weights) triple for gradient checks.

    Cycles through complete/k=3 graphs and balanced/alpha=2/alpha=5 losses,
    with every parameter group moved away from its initialization.
    """
    from .embed_io import preprocess_l2
    from .episodes import Episode

    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    L = n_way * k_shot
    M = int(rng.integers(2, max_vertices - n_way - L + 1))
    T = n_way + L + M
    support = preprocess_l2(rng.normal(size=(dim, L)))
    query = preprocess_l2(rng.normal(size=(dim, M)))
    labels = np.repeat(np.arange(n_way), k_shot)
    episode = Episode(support, labels, query, rng.integers(0, n_way, M), np.arange(n_way))
    C = support @ one_hot(labels, n_way).T / k_shot
    params = ManifoldParams(
        centroids=C + 0.05 * rng.normal(size=C.shape),
        g_raw=0.3 * rng.normal(size=(T, T)),
        b_raw=1.0 + rng.normal(size=(T, T)),
        beta=float(rng.choice([0.8, 0.9])),
        k_neighbors=None if index % 2 == 0 else 3,
        tau=15.0,
    )
    weights = (LossWeights.balanced(), LossWeights.imbalanced(2.0), LossWeights.imbalanced(5.0))[
        index % 3
    ]
    return episode, params, weights
