"""Config-driven experiment frontend: prepare data, run experiments, report results."""

from .config import ExperimentConfig, ConfigError, parse_config, parse_text, serialize
from .report import report
from .runner import RunReport, run

__all__ = ["ExperimentConfig", "ConfigError", "RunReport", "parse_config", "parse_text", "report", "run",
           "serialize"]
