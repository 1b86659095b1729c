"""Counterfactual explanations for differentiable recommenders via damped influence functions."""

from .data import Dataset, binarize, build_dataset, load_ratings, prune_users
from .explain import Explanation, explain
from .influence import DEFAULT_DAMPING, Influence, Retrainer
from .model import TrainConfig, TrainedModel, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "binarize", "build_dataset", "load_ratings", "prune_users",
    "Explanation", "explain", "DEFAULT_DAMPING", "Influence", "Retrainer",
    "TrainConfig", "TrainedModel", "train",
]
