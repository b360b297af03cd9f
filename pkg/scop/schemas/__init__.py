from .experiment import (
    DATASETS,
    ControlMode,
    Criterion,
    ExperimentConfig,
    KnockoffConfig,
    PruneConfig,
    SelectionConfig,
    TrainConfig,
)
from .pruning import LayerKeep, PruningPlan, ReductionSummary, keep_budget
from .metrics import MetricsRecord

__all__ = [
    # Experiment schemas
    "DATASETS",
    "ControlMode",
    "Criterion",
    "ExperimentConfig",
    "KnockoffConfig",
    "PruneConfig",
    "SelectionConfig",
    "TrainConfig",
    # Pruning schemas
    "LayerKeep",
    "PruningPlan",
    "ReductionSummary",
    "keep_budget",
    # Metrics schemas
    "MetricsRecord",
]
