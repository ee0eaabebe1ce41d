"""Cross-validation protocol: folds, training, metrics, profiling and sweeps."""

from .folds import FoldAssignment, make_folds
from .metrics import Metrics, accuracy, binary_auc, compute_metrics, macro_auc, macro_f1
from .profile import ComplexityRecord, ModelCard, count_macs, count_params, model_card, profile
from .sweep import (
    ExperimentResult,
    StageData,
    SweepConfig,
    SweepState,
    UnitKey,
    aggregate,
    grid_rows,
    load_records,
    run_experiment,
    sweep_plan,
)
from .train import DEFAULT_SEEDS, TrainConfig, TrainingSample, evaluate, train_one

__all__ = [
    "FoldAssignment", "make_folds", "Metrics", "accuracy", "binary_auc", "compute_metrics", "macro_auc",
    "macro_f1", "ComplexityRecord", "ModelCard", "count_macs", "count_params", "model_card", "profile",
    "ExperimentResult", "StageData", "SweepConfig", "SweepState", "UnitKey", "aggregate", "grid_rows",
    "load_records", "run_experiment", "sweep_plan", "DEFAULT_SEEDS", "TrainConfig", "TrainingSample",
    "evaluate", "train_one",
]
