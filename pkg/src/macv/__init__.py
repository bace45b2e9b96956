"""Model averaging by leave-subject-out cross-validation, with the SEAL
one-step-and-Newton approximation of the leave-out refits."""

from .data import (CandidateSpec, ClusteredDataset, Family, Subject, WeightVector,
                   WorkingCorrelation, read_csv, split_train_test, validate_dataset, write_csv)
from .estimators import fit, predict
from .losses import LossKind, LossSpec
from .seal import CvMode, CvPredictionMatrix, InverseMode, SealConfig, build_cv_matrix, seal_loo
from .selection import MethodKind, cv_select, equal_weights, qic_pan, qic_select
from .weights import OptimizerConfig, criterion_cn, minimize_weights, simplex_project

__version__ = "0.1.0"

__all__ = [
    "CandidateSpec", "ClusteredDataset", "Family", "Subject", "WeightVector",
    "WorkingCorrelation", "read_csv", "split_train_test", "validate_dataset", "write_csv",
    "fit", "predict", "LossKind", "LossSpec", "CvMode", "CvPredictionMatrix",
    "InverseMode", "SealConfig", "build_cv_matrix", "seal_loo", "MethodKind",
    "cv_select", "equal_weights", "qic_pan", "qic_select", "OptimizerConfig",
    "criterion_cn", "minimize_weights", "simplex_project",
]
