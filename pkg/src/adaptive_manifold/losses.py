"""Mutual-information objectives on the propagated probabilities.

Each term is returned with an entropy-like sign; only :func:`total_loss`
combines them::

    balanced:    l3 * CE + l2 * H_cond(Pq)       - l1 * H(mean Pq)
    imbalanced:  l3 * CE + l2 * H_cond_alpha(Pq) - l1 * H_alpha(mean Pq)

with the alpha terms ``-(1/(alpha-1)) * sum p**alpha`` (averaged over
queries for the conditional one). Every term also has a ``*_grad`` partner
returning the derivative with respect to its probability matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .propagate import ProbTriplet

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    alpha: float = 2.0
    mode: str = "imbalanced"

    def __post_init__(self):
        if self.mode not in ("balanced", "imbalanced"):
            raise ValueError(f"mode must be 'balanced' or 'imbalanced', got {self.mode!r}")
        if self.mode == "imbalanced" and (not self.alpha > 0 or self.alpha == 1.0):
            raise ValueError(f"alpha must be > 0 and != 1, got {self.alpha}")

    @classmethod
    def balanced(cls) -> LossWeights:
        return cls(lambda1=1.0, lambda2=10.0, lambda3=1.0, mode="balanced")

    @classmethod
    def imbalanced(cls, alpha: float = 2.0) -> LossWeights:
        return cls(lambda1=1.0, lambda2=1.0, lambda3=1.0, alpha=alpha, mode="imbalanced")


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((n_classes, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def _flog(p):
    return np.log(np.maximum(p, LOG_FLOOR))


def _dflog(p):
    return np.where(p > LOG_FLOOR, 1.0 / np.maximum(p, LOG_FLOOR), 0.0)


def cross_entropy_support(p_s: np.ndarray, y_s: np.ndarray) -> float:
    if p_s.shape != y_s.shape:
        raise ValueError(f"shape mismatch: {p_s.shape} vs {y_s.shape}")
    return float(-np.sum(y_s * _flog(p_s)) / p_s.shape[1])


def cross_entropy_support_grad(p_s, y_s):
    return -y_s * _dflog(p_s) / p_s.shape[1]


def conditional_entropy(p_q: np.ndarray) -> float:
    return float(-np.sum(p_q * _flog(p_q)) / p_q.shape[1])


def conditional_entropy_grad(p_q):
    return -(_flog(p_q) + p_q * _dflog(p_q)) / p_q.shape[1]


def marginal_entropy(p_q: np.ndarray) -> float:
    """Shannon entropy of the mean query distribution (positive sign)."""
    pbar = p_q.mean(axis=1)
    return float(-np.sum(pbar * _flog(pbar)))


def marginal_entropy_grad(p_q):
    pbar = p_q.mean(axis=1)
    col = -(_flog(pbar) + pbar * _dflog(pbar)) / p_q.shape[1]
    return np.broadcast_to(col[:, None], p_q.shape).copy()


def _check_alpha(alpha):
    if not alpha > 0 or alpha == 1.0:
        raise ValueError(f"alpha must be > 0 and != 1, got {alpha}")


def alpha_conditional(p_q: np.ndarray, alpha: float) -> float:
    _check_alpha(alpha)
    return float(-np.sum(p_q**alpha) / ((alpha - 1.0) * p_q.shape[1]))


def alpha_conditional_grad(p_q, alpha):
    return -alpha * p_q ** (alpha - 1.0) / ((alpha - 1.0) * p_q.shape[1])


def alpha_marginal(p_q: np.ndarray, alpha: float) -> float:
    """``-(1/(alpha-1)) * sum(pbar**alpha)``: the alpha-entropy of the mean
    query distribution, up to an additive constant."""
    _check_alpha(alpha)
    pbar = p_q.mean(axis=1)
    return float(-np.sum(pbar**alpha) / (alpha - 1.0))


def alpha_marginal_grad(p_q, alpha):
    pbar = p_q.mean(axis=1)
    col = -alpha * pbar ** (alpha - 1.0) / ((alpha - 1.0) * p_q.shape[1])
    return np.broadcast_to(col[:, None], p_q.shape).copy()


def total_loss(p: ProbTriplet, y_s: np.ndarray, w: LossWeights) -> float:
    ce = cross_entropy_support(p.p_s, y_s)
    if w.mode == "balanced":
        cond = conditional_entropy(p.p_q)
        marg = marginal_entropy(p.p_q)
    else:
        cond = alpha_conditional(p.p_q, w.alpha)
        marg = alpha_marginal(p.p_q, w.alpha)
    return w.lambda3 * ce + w.lambda2 * cond - w.lambda1 * marg


def total_loss_grad(p: ProbTriplet, y_s: np.ndarray, w: LossWeights):
    """Partials of :func:`total_loss` with respect to ``(p_s, p_q)``."""
    d_s = w.lambda3 * cross_entropy_support_grad(p.p_s, y_s)
    if w.mode == "balanced":
        d_q = w.lambda2 * conditional_entropy_grad(p.p_q) - w.lambda1 * marginal_entropy_grad(p.p_q)
    else:
        d_q = w.lambda2 * alpha_conditional_grad(p.p_q, w.alpha) - w.lambda1 * alpha_marginal_grad(
            p.p_q, w.alpha
        )
    return d_s, d_q
