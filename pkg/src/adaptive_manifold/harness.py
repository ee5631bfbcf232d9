"""Many-episode evaluation and result persistence."""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embed_io import EmbeddingSet, preprocess
from .episodes import Episode, TaskConfig, sample_episode
from .losses import one_hot
from .solver import Ablation, SolverConfig, init_centroids, solve_episode

CSV_COLUMNS = ("task_index", "accuracy", "loss_final", "num_queries_per_class")


def task_accuracy(predictions, truth) -> float:
    predictions, truth = np.asarray(predictions), np.asarray(truth)
    if predictions.shape != truth.shape:
        raise ValueError("predictions and truth differ in length")
    if truth.size == 0:
        raise ValueError("no queries to score")
    return float(np.mean(predictions == truth))


def ci95(values) -> float:
    """Normal-approximation half-width 1.96 * s / sqrt(n), with s the sample std."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(1.96 * values.std(ddof=1) / np.sqrt(values.size))


def baseline_nearest_centroid(episode: Episode, preprocessing: str = "l2") -> np.ndarray:
    """Assign each query to the closest class prototype (ties to the lower class)."""
    L = episode.support_vectors.shape[1]
    joint = preprocess(
        np.concatenate([episode.support_vectors, episode.query_vectors], axis=1), preprocessing
    )
    C = init_centroids(joint[:, :L], one_hot(episode.support_labels, episode.n_way))
    Q = joint[:, L:]
    d2 = (C**2).sum(axis=0)[:, None] - 2.0 * C.T @ Q + (Q**2).sum(axis=0)[None, :]
    return np.argmin(d2, axis=0)


@dataclass
class TaskResult:
    task_index: int
    accuracy: float
    loss_final: float
    query_counts: np.ndarray


@dataclass
class EvalReport:
    per_task_accuracy: np.ndarray
    mean_accuracy: float
    ci95: float
    config_snapshot: dict = field(default_factory=dict)
    wall_time_seconds: float = 0.0
    loss_final: np.ndarray | None = None
    query_counts: list | None = None


def config_snapshot(task_cfg: TaskConfig, solver_cfg: SolverConfig) -> dict:
    """Flat key -> value view of both configs."""
    flat = {}
    for prefix, cfg in (("task", task_cfg), ("solver", solver_cfg)):
        for k, v in _flatten(dataclasses.asdict(cfg)).items():
            flat[f"{prefix}.{k}"] = v
    return flat


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def run_task(emb: EmbeddingSet, task_cfg: TaskConfig, solver_cfg: SolverConfig,
             task_index: int) -> TaskResult:
    ep = sample_episode(emb, task_cfg, task_index)
    res = solve_episode(ep, solver_cfg, seed=task_cfg.seed)
    return TaskResult(
        task_index, task_accuracy(res.predictions, ep.query_labels), res.final_loss, ep.query_counts
    )


_WORKER = {}


def _init_worker(emb, task_cfg, solver_cfg):
    _WORKER["args"] = (emb, task_cfg, solver_cfg)


def _worker_task(task_index):
    return run_task(*_WORKER["args"], task_index)


def default_workers() -> int:
    env = os.environ.get("AM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_eval(emb: EmbeddingSet, task_cfg: TaskConfig, solver_cfg: SolverConfig,
             workers: int = 1) -> EvalReport:
    """Solve ``task_cfg.num_tasks`` episodes and aggregate in task order.

    Every task draws from its own (seed, task_index) stream, so the per-task
    results do not depend on ``workers``.
    """
    start = time.perf_counter()
    indices = range(task_cfg.num_tasks)
    if workers <= 1:
        results = [run_task(emb, task_cfg, solver_cfg, i) for i in indices]
    else:
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_init_worker, initargs=(emb, task_cfg, solver_cfg)
        ) as pool:
            results = list(pool.map(_worker_task, indices, chunksize=max(1, len(indices) // (4 * workers))))
    acc = np.array([r.accuracy for r in results])
    return EvalReport(
        per_task_accuracy=acc,
        mean_accuracy=float(acc.mean()),
        ci95=ci95(acc),
        config_snapshot=config_snapshot(task_cfg, solver_cfg),
        wall_time_seconds=time.perf_counter() - start,
        loss_final=np.array([r.loss_final for r in results]),
        query_counts=[r.query_counts for r in results],
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(report: EvalReport, path) -> None:
    """CSV rows per task plus a ``task_index = -1`` summary row, and a
    ``<path>.meta`` file of ``key = value`` lines with the config snapshot
    and summary statistics."""
    n = len(report.per_task_accuracy)
    losses = report.loss_final if report.loss_final is not None else np.full(n, np.nan)
    counts = report.query_counts or [np.array([], dtype=int)] * n
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i in range(n):
            w.writerow([i, _fmt(report.per_task_accuracy[i]), _fmt(losses[i]),
                        ";".join(str(int(c)) for c in counts[i])])
        total = np.sum(counts, axis=0) if n and len(counts[0]) else []
        w.writerow([-1, _fmt(report.mean_accuracy), _fmt(np.mean(losses)) if n else "nan",
                    ";".join(str(int(c)) for c in total)])
    meta = {
        "mean_accuracy": _fmt(report.mean_accuracy),
        "ci95": _fmt(report.ci95),
        "wall_time_seconds": _fmt(report.wall_time_seconds),
        "num_tasks": n,
    }
    meta.update(report.config_snapshot)
    with open(f"{path}.meta", "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k} = {json.dumps(v) if not isinstance(v, str) else v}\n")


def read_report(path) -> EvalReport:
    acc, losses, counts = [], [], []
    summary = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["task_index"]) == -1:
                summary = row
                continue
            acc.append(float(row["accuracy"]))
            losses.append(float(row["loss_final"]))
            q = row["num_queries_per_class"]
            counts.append(np.array([int(c) for c in q.split(";")] if q else [], dtype=np.int64))
    meta = {}
    meta_path = f"{path}.meta"
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    k, _, v = line.partition("=")
                    meta[k.strip()] = v.strip()
    snapshot = {k: v for k, v in meta.items()
                if k not in ("mean_accuracy", "ci95", "wall_time_seconds", "num_tasks")}
    acc = np.array(acc)
    return EvalReport(
        per_task_accuracy=acc,
        mean_accuracy=float(summary["accuracy"]) if summary else float(acc.mean()),
        ci95=float(meta.get("ci95", ci95(acc))),
        config_snapshot=snapshot,
        wall_time_seconds=float(meta.get("wall_time_seconds", 0.0)),
        loss_final=np.array(losses),
        query_counts=counts,
    )


# (name, kNN graph, learn C, learn G, learn B, PLC)
ABLATION_GRID = (
    ("complete", False, False, False, False, False),
    ("+NN_k", True, False, False, False, False),
    ("+C", True, True, False, False, False),
    ("+C,G", True, True, True, False, False),
    ("+C,B", True, True, False, True, False),
    ("+C,G,B", True, True, True, True, False),
    ("+C,G,B,PLC", True, True, True, True, True),
)


def ablation_configs(base: SolverConfig) -> list[tuple[str, SolverConfig]]:
    out = []
    for name, knn, c, g, b, plc in ABLATION_GRID:
        cfg = dataclasses.replace(
            base,
            k_neighbors=base.k_neighbors if knn else None,
            ablation=Ablation(c, g, b),
            preprocessing="plc" if plc else "l2",
        )
        out.append((name, cfg))
    return out


def run_ablation(emb: EmbeddingSet, task_cfg: TaskConfig, base: SolverConfig,
                 workers: int = 1) -> list[tuple[str, EvalReport]]:
    """Every grid variant on the same task stream."""
    return [(name, run_eval(emb, task_cfg, cfg, workers)) for name, cfg in ablation_configs(base)]


ABLATION_COLUMNS = ("variant", "knn", "learn_c", "learn_g", "learn_b", "preprocessing",
                    "task_seed", "num_tasks", "mean_accuracy", "ci95")


def write_ablation(rows: list[tuple[str, EvalReport]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for name, rep in rows:
            s = rep.config_snapshot
            w.writerow([
                name, s["solver.k_neighbors"] is not None,
                s["solver.ablation.learn_centroids"], s["solver.ablation.learn_g"],
                s["solver.ablation.learn_b"], s["solver.preprocessing"], s["task.seed"],
                len(rep.per_task_accuracy), _fmt(rep.mean_accuracy), _fmt(rep.ci95),
            ])
