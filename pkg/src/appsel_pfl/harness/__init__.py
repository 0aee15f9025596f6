"""Configuration, experiment runner, reports and the command line."""
from appsel_pfl.harness.config import ConfigError, ExperimentConfig, config_hash, parse_config
from appsel_pfl.harness.report import ComparisonError, compare
from appsel_pfl.harness.runner import (
    EXIT_CONFIG, EXIT_DIVERGED, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_OK, run,
)

__all__ = ["EXIT_CONFIG", "EXIT_DIVERGED", "EXIT_ERROR", "EXIT_INFEASIBLE", "EXIT_OK",
           "ComparisonError", "ConfigError", "ExperimentConfig", "compare", "config_hash",
           "parse_config", "run"]
