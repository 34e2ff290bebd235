"""Selective prefix handoff: features, network, focal loss, training and out-of-fold data."""
from .features import MARGIN_CAP, DegenerateInputError, ScalarFeatures, compute_scalar_features
from .focal import BAD, GOOD, FocalLossConfig, focal_loss
from .network import VerifierModel, forward, init_model
from .estimator import (
    Decision,
    PrefixVerifier,
    TrainingConfig,
    TrainingError,
    TrainingReport,
    commit_mask,
    decide,
    operating_points,
    ranking_metrics,
    train,
)
from .kfold import (
    FileLabelOracle,
    LabeledPrefix,
    PartitionError,
    RuleOracle,
    assign_folds,
    build_kfold_dataset,
    leakage_violations,
)
from .io import load_model, read_dataset, save_model, write_dataset

__all__ = [
    "BAD", "GOOD", "MARGIN_CAP", "Decision", "DegenerateInputError", "FileLabelOracle", "FocalLossConfig",
    "LabeledPrefix", "PartitionError", "PrefixVerifier", "RuleOracle", "ScalarFeatures", "TrainingConfig",
    "TrainingError", "TrainingReport", "VerifierModel", "assign_folds", "build_kfold_dataset", "commit_mask",
    "compute_scalar_features", "decide", "focal_loss", "forward", "init_model", "leakage_violations",
    "load_model", "operating_points", "ranking_metrics", "read_dataset", "save_model", "train", "write_dataset",
]
