"""Shared deterministic numerical kernel."""

from .clustering import ClusteringState, PCAState, gmm_fit, kmeans, pca_fit, pca_transform
from .logistic import LogisticModel, logistic_fit, logistic_objective, logistic_predict
from .nets import Net
from .optimize import (ConvergenceError, OptimizeResult, OptimizerConfig, OptimizerError,
                       check_gradient, minimize)
from .rng import derive_seed, make_rng, weighted_draw

__all__ = [
    "ClusteringState", "PCAState", "gmm_fit", "kmeans", "pca_fit", "pca_transform",
    "LogisticModel", "logistic_fit", "logistic_objective", "logistic_predict", "Net",
    "ConvergenceError", "OptimizeResult", "OptimizerConfig", "OptimizerError",
    "check_gradient", "minimize", "derive_seed", "make_rng", "weighted_draw",
]
