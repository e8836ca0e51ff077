"""Experiment orchestration: configs, runs, reports, costs and checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .cost import cost_account
from .reports import emit_reports
from .runner import ExperimentResult, run_experiment, run_seed

__all__ = [
    "Checkpoint", "ExperimentConfig", "ExperimentResult", "cost_account", "emit_reports",
    "load_checkpoint", "load_config", "run_experiment", "run_seed", "save_checkpoint",
]
