"""Experiment driver: configuration, pipeline wiring, sweeps and reports."""

from sdaserve.harness.config import ConfigError, ExperimentConfig, PolicyConfig, RoleConfig, load_config
from sdaserve.harness.experiment import compare_modes, compute_capacity, run_experiment, simulate
from sdaserve.harness.report import Report, ReportRow

__all__ = [
    "ConfigError", "ExperimentConfig", "PolicyConfig", "RoleConfig", "load_config",
    "compare_modes", "compute_capacity", "run_experiment", "simulate", "Report", "ReportRow",
]
