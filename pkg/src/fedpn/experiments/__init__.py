"""Experiment runners producing :class:`MetricsTable` results."""

from .label_noise import group_summary, run_label_noise_experiment
from .metrics import ABSENT, AccuracyMatrix, MetricsTable, accuracy, per_class_accuracy_matrix, write_table
from .precision import precision_curve, run_precision_filter_experiment
from .switching import SwitchingResult, mix_indices, run_switching_benchmark
from .toy import run_toy_loss_experiment, train_toy_model

__all__ = [
    "ABSENT",
    "AccuracyMatrix",
    "MetricsTable",
    "SwitchingResult",
    "accuracy",
    "group_summary",
    "mix_indices",
    "per_class_accuracy_matrix",
    "precision_curve",
    "run_label_noise_experiment",
    "run_precision_filter_experiment",
    "run_switching_benchmark",
    "run_toy_loss_experiment",
    "train_toy_model",
    "write_table",
]
