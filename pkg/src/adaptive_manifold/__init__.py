"""Adaptive manifold transductive few-shot classification on precomputed embeddings."""

from .diff import GradPhi, backward, finite_diff_oracle, forward, gradcheck
from .embed_io import (
    EmbeddingSet,
    SynthConfig,
    load_embeddings,
    preprocess_l2,
    preprocess_plc,
    save_embeddings,
    synth_gaussian,
)
from .episodes import Episode, TaskConfig, sample_episode
from .graph import ManifoldParams, build_graph
from .harness import EvalReport, baseline_nearest_centroid, run_ablation, run_eval
from .losses import LossWeights, total_loss
from .propagate import class_softmax, label_propagate, predict_labels
from .solver import Ablation, SolverConfig, solve_episode

__version__ = "0.1.0"
