from .dataset_service import Dataset, Normalization, load_cifar10, load_dataset, load_mnist, make_planted_dataset
from .checkpoint_service import load_checkpoint, load_network, save_checkpoint, save_network
from .knockoff_service import (
    BiasPairModel,
    KnockoffModel,
    choose_s_equicorrelated,
    default_bias_pair_model,
    fit_knockoff_model,
    generate_knockoff_dataset,
    sample_bias_pair,
    sample_knockoff,
    swap_moment_test,
)
from .selection_service import ControlSource, SelectionState, make_control_batch, optimize_scaling, selection_forward
from .pruning_service import ImportanceReport, apply_plan, compute_importance, make_plan, reduction_summary
from .training_service import evaluate, train
from .pipeline_service import ScopPipeline, ablate, planted_diagnostic, run_scop, sweep_rates
from .report_service import emit_feature_histograms

__all__ = [
    "Dataset", "Normalization", "load_cifar10", "load_dataset", "load_mnist", "make_planted_dataset",
    "load_checkpoint", "load_network", "save_checkpoint", "save_network",
    "BiasPairModel", "KnockoffModel", "choose_s_equicorrelated", "default_bias_pair_model",
    "fit_knockoff_model", "generate_knockoff_dataset", "sample_bias_pair", "sample_knockoff",
    "swap_moment_test",
    "ControlSource", "SelectionState", "make_control_batch", "optimize_scaling", "selection_forward",
    "ImportanceReport", "apply_plan", "compute_importance", "make_plan", "reduction_summary",
    "evaluate", "train",
    "ScopPipeline", "ablate", "planted_diagnostic", "run_scop", "sweep_rates",
    "emit_feature_histograms",
]
