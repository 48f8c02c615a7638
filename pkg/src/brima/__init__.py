"""Continual multi-modal score regression with bridged imputation of missing
modalities and modality-aware prioritised replay."""

from .data import MultiModalSample, StreamConfig, TaskData, TaskStream, generate_synthetic_stream, load_stream, save_stream
from .errors import BrimaError
from .metrics import SessionReport, fisher_z_average, forgetting, mse, rl2, srcc
from .trainer import VARIANTS, TrainerConfig, run_ablation_grid, run_stream

__version__ = "0.1.0"

__all__ = [
    "BrimaError",
    "MultiModalSample",
    "SessionReport",
    "StreamConfig",
    "TaskData",
    "TaskStream",
    "TrainerConfig",
    "VARIANTS",
    "fisher_z_average",
    "forgetting",
    "generate_synthetic_stream",
    "load_stream",
    "mse",
    "rl2",
    "run_ablation_grid",
    "run_stream",
    "save_stream",
    "srcc",
]
