"""Command-line entry point: ``am-fsl {synth,eval,ablate,gradcheck}``.

Settings resolve as command-line flag > ``--config`` file > built-in
default. Config files hold ``key = value`` lines (``#`` starts a comment);
keys are flag names with or without the leading dashes.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import diff
from .embed_io import AmebError, SynthConfig, load_embeddings, save_embeddings, synth_gaussian
from .episodes import EpisodeError, TaskConfig
from .graph import GraphError
from .harness import default_workers, run_ablation, run_eval, write_ablation, write_report
from .losses import LossWeights
from .propagate import PropagationError
from .solver import SolverConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


SYNTH_DEFAULTS = {
    "classes": 20, "dim": 64, "per_class": 600, "sep": 4.0, "sigma": 1.0, "seed": 0, "out": None,
}
TASK_DEFAULTS = {
    "data": None, "shots": 1, "ways": 5, "queries": 75, "imbalance": "dirichlet:2",
    "tasks": 1000, "preprocessing": "l2", "loss": None, "r": 1000, "lr": 1e-4, "k": None,
    "beta": None, "tau": 15.0, "seed": 0, "threads": None, "out": "results.csv",
}
GRADCHECK_DEFAULTS = {"episodes": 20, "seed": 0, "h": 1e-5, "tol": 1e-4, "dim": 8}


def _add(p, name, type_, defaults, help_, shown=None, **kw):
    default = defaults[name.replace("-", "_")]
    if shown is None and default is not None:
        shown = default
    if shown is not None:
        help_ = f"{help_} (default: {shown})"
    p.add_argument(f"--{name}", type=type_, default=None, help=help_, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="am-fsl", description="Adaptive manifold transductive few-shot tools")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic Gaussian embedding set")
    p.add_argument("--config", help="key = value overlay file")
    _add(p, "classes", int, SYNTH_DEFAULTS, "number of classes")
    _add(p, "dim", int, SYNTH_DEFAULTS, "embedding dimension")
    _add(p, "per-class", int, SYNTH_DEFAULTS, "examples per class")
    _add(p, "sep", float, SYNTH_DEFAULTS, "distance of each class mean from the origin")
    _add(p, "sigma", float, SYNTH_DEFAULTS, "within-class noise std")
    _add(p, "seed", int, SYNTH_DEFAULTS, "random seed")
    _add(p, "out", str, SYNTH_DEFAULTS, "output AMEB path (required)")

    for name, help_ in (("eval", "evaluate over many episodes"),
                        ("ablate", "run the seven-variant component ablation")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value overlay file")
        _add(p, "data", str, TASK_DEFAULTS, "AMEB embedding file (required)")
        _add(p, "shots", int, TASK_DEFAULTS, "K, support examples per class (1 or 5)")
        _add(p, "ways", int, TASK_DEFAULTS, "N, classes per task")
        _add(p, "queries", int, TASK_DEFAULTS, "M, queries per task")
        _add(p, "imbalance", str, TASK_DEFAULTS, "'balanced' or 'dirichlet:GAMMA'")
        _add(p, "tasks", int, TASK_DEFAULTS, "number of tasks")
        _add(p, "preprocessing", str, TASK_DEFAULTS, "'l2' or 'plc'")
        _add(p, "loss", str, TASK_DEFAULTS,
             "'balanced' or 'alpha:ALPHA'",
             shown="alpha:2 for 1-shot, alpha:5 for 5-shot dirichlet tasks; balanced otherwise")
        _add(p, "r", int, TASK_DEFAULTS, "adaptation steps")
        _add(p, "lr", float, TASK_DEFAULTS, "Adam learning rate")
        _add(p, "k", str, TASK_DEFAULTS, "neighbours per vertex or 'none' for a complete graph",
             shown="20 for 1-shot, 10 for 5-shot")
        _add(p, "beta", float, TASK_DEFAULTS, "propagation damping",
             shown="0.8 for 1-shot, 0.9 for 5-shot")
        _add(p, "tau", float, TASK_DEFAULTS, "softmax scale")
        _add(p, "seed", int, TASK_DEFAULTS, "task-stream seed")
        _add(p, "threads", int, TASK_DEFAULTS, "worker processes",
             shown="$AM_THREADS, else all cores")
        _add(p, "out", str, TASK_DEFAULTS, "output CSV path")

    p = sub.add_parser("gradcheck", help="compare analytic gradients to finite differences")
    p.add_argument("--config", help="key = value overlay file")
    _add(p, "episodes", int, GRADCHECK_DEFAULTS, "number of random episodes")
    _add(p, "seed", int, GRADCHECK_DEFAULTS, "random seed")
    _add(p, "h", float, GRADCHECK_DEFAULTS, "finite-difference step")
    _add(p, "tol", float, GRADCHECK_DEFAULTS, "maximum relative error")
    _add(p, "dim", int, GRADCHECK_DEFAULTS, "embedding dimension")
    return parser


def read_config(path: str, allowed) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key = key.strip().lstrip("-").replace("-", "_")
            if key not in allowed:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value.strip()
    return out


def resolve(args: argparse.Namespace, defaults: dict, parser: argparse.ArgumentParser) -> dict:
    """Merge flags over config over defaults, coercing config strings."""
    types = {a.dest: a.type for a in parser._actions if a.dest in defaults}
    merged = dict(defaults)
    if args.config:
        for k, v in read_config(args.config, defaults).items():
            try:
                merged[k] = types[k](v) if types.get(k) else v
            except ValueError:
                raise UsageError(f"bad value for {k!r}: {v!r}") from None
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _number(text: str, flag: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"{flag}: not a number: {text!r}") from None


def parse_imbalance(text: str) -> float | None:
    if text == "balanced":
        return None
    kind, _, value = text.partition(":")
    if kind != "dirichlet" or not value:
        raise UsageError(f"--imbalance must be 'balanced' or 'dirichlet:GAMMA', got {text!r}")
    gamma = _number(value, "--imbalance")
    if not gamma > 0:
        raise UsageError("dirichlet gamma must be > 0")
    return gamma


def parse_loss(text: str) -> LossWeights:
    if text == "balanced":
        return LossWeights.balanced()
    kind, _, value = text.partition(":")
    if kind != "alpha" or not value:
        raise UsageError(f"--loss must be 'balanced' or 'alpha:ALPHA', got {text!r}")
    alpha = _number(value, "--loss")
    if not alpha > 0 or alpha == 1.0:
        raise UsageError(f"alpha must be > 0 and != 1, got {alpha}")
    return LossWeights.imbalanced(alpha)


def task_and_solver(o: dict) -> tuple[TaskConfig, SolverConfig]:
    if o["data"] is None:
        raise UsageError("--data is required")
    if o["preprocessing"] not in ("l2", "plc"):
        raise UsageError("--preprocessing must be 'l2' or 'plc'")
    gamma = parse_imbalance(o["imbalance"])
    try:
        task = TaskConfig(n_way=o["ways"], k_shot=o["shots"], m_query=o["queries"],
                          dirichlet_gamma=gamma, seed=o["seed"], num_tasks=o["tasks"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    overrides = dict(r_steps=o["r"], lr=o["lr"], tau=o["tau"], preprocessing=o["preprocessing"])
    if o["loss"] is not None:
        overrides["loss"] = parse_loss(o["loss"])
    if o["k"] is not None:
        k = str(o["k"])
        overrides["k_neighbors"] = None if k.lower() == "none" else int(_number(k, "--k"))
    if o["beta"] is not None:
        if not 0 <= o["beta"] < 1:
            raise UsageError("--beta must lie in [0, 1)")
        overrides["beta"] = o["beta"]
    solver = SolverConfig.defaults(o["shots"], imbalanced=gamma is not None, **overrides)
    return task, solver


def cmd_synth(o: dict) -> int:
    if o["out"] is None:
        raise UsageError("--out is required")
    cfg = SynthConfig(o["classes"], o["dim"], o["per_class"], o["sep"], o["sigma"], o["seed"])
    try:
        emb = synth_gaussian(cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None
    save_embeddings(emb, o["out"])
    print(f"wrote {len(emb)} records to {o['out']}")
    return EXIT_OK


def _workers(o):
    return o["threads"] if o["threads"] is not None else default_workers()


def cmd_eval(o: dict) -> int:
    task, solver = task_and_solver(o)
    emb = load_embeddings(o["data"])
    report = run_eval(emb, task, solver, workers=_workers(o))
    write_report(report, o["out"])
    print(f"tasks={task.num_tasks} mean_accuracy={100 * report.mean_accuracy:.2f} "
          f"ci95={100 * report.ci95:.2f} time={report.wall_time_seconds:.1f}s out={o['out']}")
    return EXIT_OK


def cmd_ablate(o: dict) -> int:
    task, solver = task_and_solver(o)
    emb = load_embeddings(o["data"])
    rows = run_ablation(emb, task, solver, workers=_workers(o))
    write_ablation(rows, o["out"])
    for name, rep in rows:
        print(f"{name:<12} {100 * rep.mean_accuracy:6.2f} +- {100 * rep.ci95:.2f}")
    return EXIT_OK


def cmd_gradcheck(o: dict) -> int:
    worst = {g: 0.0 for g in diff.GROUPS}
    failed = {g: 0 for g in diff.GROUPS}
    largest = {g: 0.0 for g in diff.GROUPS}
    checked = skipped = 0
    for i in range(o["episodes"]):
        episode, params, weights = diff.random_case(o["seed"], i, dim=o["dim"])
        report = diff.gradcheck(episode, params, weights, h=o["h"], tol=o["tol"])
        for g, res in report.items():
            worst[g] = max(worst[g], res.max_rel_err)
            failed[g] += res.failed
            largest[g] = max(largest[g], res.max_failed_fd)
            checked += res.checked
            skipped += res.skipped
    for g, err in worst.items():
        line = f"{g:<10} max_rel_err={err:.3e}"
        if failed[g]:
            line += f" over_tol={failed[g]} largest_|fd|_over_tol={largest[g]:.1e}"
        print(line)
    skip_rate = skipped / max(checked + skipped, 1)
    print(f"coordinates checked={checked} skipped(kNN flip)={skipped} ({100 * skip_rate:.2f}%)")
    ok = max(worst.values()) < o["tol"] and skip_rate < 0.05
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": (cmd_synth, SYNTH_DEFAULTS),
    "eval": (cmd_eval, TASK_DEFAULTS),
    "ablate": (cmd_ablate, TASK_DEFAULTS),
    "gradcheck": (cmd_gradcheck, GRADCHECK_DEFAULTS),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    fn, defaults = COMMANDS[args.command]
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return fn(resolve(args, defaults, sub))
    except UsageError as e:
        print(f"am-fsl {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AmebError, EpisodeError, OSError) as e:
        print(f"am-fsl {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, GraphError, PropagationError, np.linalg.LinAlgError) as e:
        print(f"am-fsl {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
