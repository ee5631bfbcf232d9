"""Closed-form label propagation and class probabilities."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve


class PropagationError(ArithmeticError):
    pass


def label_matrix(n_centroids: int, n_vertices: int) -> np.ndarray:
    """One-hot rows for the centroids, zeros for support and query columns."""
    return np.eye(n_centroids, n_vertices)


def propagation_factor(W_norm: np.ndarray, beta: float):
    """LU factors (LAPACK getrf) of ``I - beta * W_norm``."""
    T = W_norm.shape[0]
    M = np.eye(T) - beta * W_norm
    with warnings.catch_warnings():
        # a zero pivot is reported below as PropagationError
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(M, check_finite=True)
    if np.any(np.diag(lu) == 0.0):
        raise PropagationError("I - beta * W is singular")
    return lu, piv


def label_propagate(Y: np.ndarray, W_norm: np.ndarray, beta: float, factor=None) -> np.ndarray:
    """Return Z solving ``Z (I - beta W) = Y``.

    Pass ``factor`` from :func:`propagation_factor` to reuse a factorization.
    The system is solved transposed: ``(I - beta W)^T Z^T = Y^T``.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if factor is None:
        factor = propagation_factor(W_norm, beta)
    return lu_solve(factor, Y.T, trans=1).T


@dataclass
class ProbTriplet:
    p_c: np.ndarray
    p_s: np.ndarray
    p_q: np.ndarray
    z: np.ndarray

    @property
    def full(self) -> np.ndarray:
        return np.concatenate([self.p_c, self.p_s, self.p_q], axis=1)


def softmax_columns(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def class_softmax(Z: np.ndarray, tau: float, n_support: int) -> ProbTriplet:
    """Column softmax of ``tau * Z`` split into centroid/support/query blocks."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not np.all(np.isfinite(Z)):
        raise PropagationError("non-finite class similarities")
    n = Z.shape[0]
    P = softmax_columns(tau * Z)
    return ProbTriplet(
        p_c=P[:, :n], p_s=P[:, n : n + n_support], p_q=P[:, n + n_support :], z=Z
    )


def predict_labels(p_q: np.ndarray) -> np.ndarray:
    """Per-column argmax; ties resolve to the lowest class index."""
    return np.argmax(p_q, axis=0)
