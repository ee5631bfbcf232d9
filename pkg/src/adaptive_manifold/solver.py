"""The adaptive-manifold loop. After pre-processing and initialization,
each step rebuilds the graph from the current parameters and takes one
Adam step on the loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diff import GradPhi, backward, forward
from .embed_io import preprocess
from .episodes import Episode
from .graph import ManifoldParams
from .losses import LossWeights, one_hot
from .propagate import predict_labels


@dataclass(frozen=True)
class Ablation:
    learn_centroids: bool = True
    learn_g: bool = True
    learn_b: bool = True

    @property
    def any(self) -> bool:
        return self.learn_centroids or self.learn_g or self.learn_b

    def enabled(self, group: str) -> bool:
        return {
            "centroids": self.learn_centroids,
            "g_raw": self.learn_g,
            "b_raw": self.learn_b,
        }[group]


FROZEN = Ablation(False, False, False)


@dataclass(frozen=True)
class SolverConfig:
    r_steps: int = 1000
    lr: float = 1e-4
    loss: LossWeights = field(default_factory=LossWeights.imbalanced)
    k_neighbors: int | None = 20
    beta: float = 0.8
    tau: float = 15.0
    preprocessing: str = "l2"
    ablation: Ablation = field(default_factory=Ablation)

    @classmethod
    def defaults(cls, shots: int = 1, imbalanced: bool = True, **overrides) -> SolverConfig:
        """Default settings: k=20, beta=0.8, alpha=2 for 1-shot;
        k=10, beta=0.9, alpha=5 otherwise."""
        one = shots == 1
        loss = LossWeights.imbalanced(2.0 if one else 5.0) if imbalanced else LossWeights.balanced()
        base = dict(
            loss=loss,
            k_neighbors=20 if one else 10,
            beta=0.8 if one else 0.9,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(phi: ManifoldParams, grads: GradPhi, state: AdamState, lr: float,
              flags: Ablation = Ablation()) -> tuple[ManifoldParams, AdamState]:
    """Bias-corrected Adam on the enabled groups; frozen groups are left as is.

    Updates ``phi`` and ``state`` in place and returns both.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for group in ("centroids", "g_raw", "b_raw"):
        if not flags.enabled(group):
            continue
        g = grads.group(group)
        m = state.first_moment.setdefault(group, np.zeros_like(g))
        v = state.second_moment.setdefault(group, np.zeros_like(g))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        param = getattr(phi, group)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return phi, state


def init_centroids(support: np.ndarray, y_s: np.ndarray) -> np.ndarray:
    """Class prototypes: mean of each class's support columns."""
    counts = y_s.sum(axis=1)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"class {empty[0]} has no support examples")
    return (support @ y_s.T) / counts


@dataclass
class SolveResult:
    p_q: np.ndarray
    predictions: np.ndarray
    trace: np.ndarray  # loss before each update, length r_steps
    final_loss: float
    params: ManifoldParams


def prepare(episode: Episode, cfg: SolverConfig):
    """Pre-processed support/query blocks and the initial parameters."""
    L = episode.support_vectors.shape[1]
    joint = np.concatenate([episode.support_vectors, episode.query_vectors], axis=1)
    joint = preprocess(joint, cfg.preprocessing)
    support, query = joint[:, :L], joint[:, L:]
    y_s = one_hot(episode.support_labels, episode.n_way)
    C = init_centroids(support, y_s)
    T = C.shape[1] + joint.shape[1]
    phi = ManifoldParams.initial(
        C, T, beta=cfg.beta, k_neighbors=cfg.k_neighbors, tau=cfg.tau
    )
    return support, query, phi


def solve_episode(episode: Episode, cfg: SolverConfig, seed: int | None = None,
                  phi: ManifoldParams | None = None) -> SolveResult:
    """Run ``cfg.r_steps`` updates and return the final query probabilities.

    The algorithm is deterministic; ``seed`` is accepted for interface
    symmetry with the harness and unused. An explicit ``phi`` replaces the
    default initialization and is updated in place.
    """
    support, query, phi0 = prepare(episode, cfg)
    if phi is None:
        phi = phi0
    labels = episode.support_labels
    w = cfg.loss
    trace = np.empty(cfg.r_steps)

    if cfg.ablation.any:
        state = AdamState()
        for step in range(cfg.r_steps):
            tape = forward(support, labels, query, phi, w)
            trace[step] = tape.loss
            adam_step(phi, backward(tape), state, cfg.lr, cfg.ablation)
        tape = forward(support, labels, query, phi, w)
    else:
        # nothing moves, every iteration would repeat the same pass
        tape = forward(support, labels, query, phi, w)
        trace[:] = tape.loss

    if not np.all(np.isfinite(trace)) or not np.isfinite(tape.loss):
        raise FloatingPointError("non-finite loss during adaptation")
    p_q = tape.probs.p_q
    return SolveResult(p_q, predict_labels(p_q), trace, tape.loss, phi)
