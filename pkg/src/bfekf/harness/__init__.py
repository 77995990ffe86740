"""Experiment configuration, runners, benchmarks and the command line."""

from .config import ExperimentConfig, load_config
from .metrics import MetricsReport, TimingStats, compute_rmse

__all__ = ["ExperimentConfig", "MetricsReport", "TimingStats", "compute_rmse", "load_config"]
