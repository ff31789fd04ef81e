"""Continual learning with a fixed semantic model via bidirectional feature generation."""
from .data import AttributeTable, BenchmarkSpec, Dataset, TaskSequence, generate_benchmark, load_dataset, split_tasks
from .estimator import BImagClassifier
from .experiment import RunRecord, run_bcl
from .metrics import autac, harmonic_mean, mean_autac, per_class_accuracy
from .training import TrainingConfig, Variant

__all__ = [
    "AttributeTable", "BenchmarkSpec", "BImagClassifier", "Dataset", "RunRecord", "TaskSequence",
    "TrainingConfig", "Variant", "autac", "generate_benchmark", "harmonic_mean", "load_dataset",
    "mean_autac", "per_class_accuracy", "run_bcl", "split_tasks",
]

__version__ = "0.1.0"
