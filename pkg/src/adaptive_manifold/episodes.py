"""N-way K-shot episode sampling, balanced or with Dirichlet class imbalance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embed_io import EmbeddingSet


class EpisodeError(ValueError):
    """The embedding set cannot supply the requested episode."""


@dataclass(frozen=True)
class TaskConfig:
    """Episode protocol.

    ``dirichlet_gamma=None`` selects balanced queries (M/N per class);
    otherwise query proportions are drawn from a symmetric Dirichlet.
    """

    n_way: int = 5
    k_shot: int = 1
    m_query: int = 75
    dirichlet_gamma: float | None = 2.0
    seed: int = 0
    num_tasks: int = 1000

    def __post_init__(self):
        if min(self.n_way, self.k_shot, self.m_query, self.num_tasks) < 1:
            raise ValueError("n_way, k_shot, m_query and num_tasks must be positive")
        if self.dirichlet_gamma is None:
            if self.m_query % self.n_way:
                raise ValueError(
                    f"balanced tasks need n_way | m_query, got {self.n_way}, {self.m_query}"
                )
        elif not self.dirichlet_gamma > 0:
            raise ValueError("dirichlet_gamma must be > 0")

    @property
    def balanced(self) -> bool:
        return self.dirichlet_gamma is None


@dataclass
class Episode:
    support_vectors: np.ndarray  # d x L, class-major
    support_labels: np.ndarray  # L, in [0, N)
    query_vectors: np.ndarray  # d x M
    query_labels: np.ndarray  # M, hidden; scoring only
    class_map: np.ndarray  # N original class ids

    @property
    def n_way(self) -> int:
        return len(self.class_map)

    @property
    def query_counts(self) -> np.ndarray:
        return np.bincount(self.query_labels, minlength=self.n_way)


def task_rng(seed: int, task_index: int) -> np.random.Generator:
    """Independent stream per (seed, task) so tasks can be drawn in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, task_index]))


def sample_proportions(n_way: int, gamma: float, rng: np.random.Generator) -> np.ndarray:
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    g = rng.gamma(gamma, 1.0, size=n_way)
    return g / g.sum()


def proportions_to_counts(pi, m_query: int) -> np.ndarray:
    """Largest-remainder rounding of ``pi * m_query``; ties go to the lower index."""
    scaled = np.asarray(pi, dtype=np.float64) * m_query
    counts = np.floor(scaled).astype(np.int64)
    short = m_query - int(counts.sum())
    if short > 0:
        order = np.argsort(-(scaled - counts), kind="stable")
        counts[order[:short]] += 1
    elif short < 0:
        # float round-up can overshoot by one in pathological cases
        order = np.argsort(scaled - counts, kind="stable")
        for j in order:
            if short == 0:
                break
            if counts[j] > 0:
                counts[j] -= 1
                short += 1
    return counts


def query_counts(cfg: TaskConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.balanced:
        return np.full(cfg.n_way, cfg.m_query // cfg.n_way, dtype=np.int64)
    pi = sample_proportions(cfg.n_way, cfg.dirichlet_gamma, rng)
    return proportions_to_counts(pi, cfg.m_query)


def sample_episode(emb: EmbeddingSet, cfg: TaskConfig, task_index: int) -> Episode:
    rng = task_rng(cfg.seed, task_index)
    present = np.flatnonzero(np.bincount(emb.labels, minlength=emb.num_classes))
    if present.size < cfg.n_way:
        raise EpisodeError(
            f"need {cfg.n_way} classes, embedding set has {present.size} non-empty"
        )
    classes = rng.choice(present, size=cfg.n_way, replace=False)
    counts = query_counts(cfg, rng)

    support_idx, query_idx, query_lab = [], [], []
    for j, (cls, q) in enumerate(zip(classes, counts)):
        pool = emb.indices_of(cls)
        need = cfg.k_shot + q
        if pool.size < need:
            raise EpisodeError(
                f"class {cls} has {pool.size} examples, task {task_index} needs {need}"
            )
        picked = rng.choice(pool, size=need, replace=False)
        support_idx.append(picked[: cfg.k_shot])
        query_idx.append(picked[cfg.k_shot :])
        query_lab.append(np.full(q, j))
    support_idx = np.concatenate(support_idx)
    query_idx = np.concatenate(query_idx)
    query_lab = np.concatenate(query_lab).astype(np.int64)
    shuffle = rng.permutation(query_idx.size)
    query_idx, query_lab = query_idx[shuffle], query_lab[shuffle]

    return Episode(
        support_vectors=emb.vectors[:, support_idx],
        support_labels=np.repeat(np.arange(cfg.n_way), cfg.k_shot),
        query_vectors=emb.vectors[:, query_idx],
        query_labels=query_lab,
        class_map=classes.astype(np.int64),
    )
