"""From-scratch binary membership classifiers and the tree engine behind them."""

from .models import (
    HYPERPARAMETERS,
    KIND_ORDER,
    EstimatorError,
    EstimatorKind,
    FittedEstimator,
    fit,
    fit_all,
    score,
)
from .trees import BoostedTrees, Tree, build_classification_tree, build_regression_tree

__all__ = [
    "HYPERPARAMETERS",
    "KIND_ORDER",
    "BoostedTrees",
    "EstimatorError",
    "EstimatorKind",
    "FittedEstimator",
    "Tree",
    "build_classification_tree",
    "build_regression_tree",
    "fit",
    "fit_all",
    "score",
]
