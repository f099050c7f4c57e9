"""Sparse continual learning on a small numpy neural-network engine."""
from ._accel import BACKEND
from .config import TrainConfig
from .data import TaskStream, build_split_tasks, build_synthetic_tasks, load_idx
from .errors import (ArgumentError, DimensionError, FormatError, NumericError, SparseCLError,
                     StateError)
from .trainer import RunReport, emit_report, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "TrainConfig",
    "TaskStream",
    "build_split_tasks",
    "build_synthetic_tasks",
    "load_idx",
    "run_experiment",
    "emit_report",
    "RunReport",
    "SparseCLError",
    "ArgumentError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "StateError",
]
