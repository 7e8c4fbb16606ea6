"""Experiment harness: config, training loops, metrics, diagnostics, CLI."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .divergence import DivergenceReport, divergence_report, js_divergence
from .metrics import MetricsReport, evaluate_checkpoint
from .train import TrainingDiverged, run_adaptation, train_source

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "MetricsReport",
    "evaluate_checkpoint",
    "DivergenceReport",
    "divergence_report",
    "js_divergence",
    "TrainingDiverged",
    "train_source",
    "run_adaptation",
]
