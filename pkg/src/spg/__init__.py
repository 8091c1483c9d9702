"""Soft-masking of parameter-level gradients for task-incremental continual
learning, with the naive/independent/joint/EWC baselines, its ablations, and
the importance, pruning, and representation analyses around it."""

from .config import Method, RunConfig, TrainConfig, load_config, parse_config
from .data import (TaskDataset, TaskStream, gen_dissimilar_stream, gen_similar_stream,
                   load_idx, split_by_class)
from .evaluate import (AccuracyMatrix, avg_accuracy, backward_transfer, forward_transfer,
                       pruning_experiment, representation_probe)
from .importance import (ChiStats, ImportanceState, TaskImportance, accumulate,
                         chi_overwrite_stats, compute_task_importance, fisher_importance,
                         importance_gradient, layer_normalize, raw_importance)
from .masking import blocked_fraction, harden, soft_mask_extractor, soft_mask_head
from .model import TILModel, add_head, build_model, forward_task, param_count
from .nn import Batch, GradientSet, LayerParams, Network
from .trainer import (EwcState, RunResult, ewc_penalty_grad, fit_single_task,
                      one_reference, run_continual, train_task)

__all__ = [
    "AccuracyMatrix", "Batch", "ChiStats", "EwcState", "GradientSet",
    "ImportanceState", "LayerParams", "Method", "Network", "RunConfig", "RunResult",
    "TILModel", "TaskDataset", "TaskImportance", "TaskStream", "TrainConfig",
    "accumulate", "add_head", "avg_accuracy", "backward_transfer", "blocked_fraction",
    "build_model", "chi_overwrite_stats", "compute_task_importance", "ewc_penalty_grad",
    "fisher_importance", "fit_single_task", "forward_task", "forward_transfer",
    "gen_dissimilar_stream", "gen_similar_stream", "harden", "importance_gradient",
    "layer_normalize", "load_config", "load_idx", "one_reference", "param_count",
    "parse_config", "pruning_experiment", "raw_importance", "representation_probe",
    "run_continual", "soft_mask_extractor", "soft_mask_head", "split_by_class",
    "train_task",
]
