"""Graph classification with a label-contrastive memory bank and momentum key encoder."""

from .data import (
    FoldSplit,
    Graph,
    GraphDataset,
    degree_onehot_features,
    load_dataset,
    make_fixture,
    parse_tu_dataset,
    write_tu_dataset,
)
from .estimator import LCGNNClassifier
from .experiments import (
    CVResult,
    run_ablation,
    run_cross_validation,
    run_fold,
    run_less_data_experiment,
)
from .trainer import TrainingConfig

__version__ = "0.1.0"

__all__ = [
    "FoldSplit",
    "Graph",
    "GraphDataset",
    "degree_onehot_features",
    "load_dataset",
    "make_fixture",
    "parse_tu_dataset",
    "write_tu_dataset",
    "LCGNNClassifier",
    "CVResult",
    "run_ablation",
    "run_cross_validation",
    "run_fold",
    "run_less_data_experiment",
    "TrainingConfig",
]
