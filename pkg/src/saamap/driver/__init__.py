"""Bound-constrained optimizer, experiment harness, configuration and CLI."""

from .config import ConfigError, RunConfig, load_config
from .experiments import ExperimentSpec, named_experiment, run_experiment
from .optimize import MinimizeResult, minimize

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "ExperimentSpec",
    "named_experiment",
    "run_experiment",
    "MinimizeResult",
    "minimize",
]
