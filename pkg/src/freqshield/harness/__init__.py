"""Experiment orchestration: config parsing, pipeline stages, reports and the CLI."""

from .config import ConfigError, Epsilon, parse_eps, parse_eps_list
from .pipeline import (ArtifactError, ReportRow, Sweep, attack_sweep, evaluate_stage, read_report, render_markdown,
                       score_detectors, write_report)

__all__ = ["ArtifactError", "ConfigError", "Epsilon", "ReportRow", "Sweep", "attack_sweep", "evaluate_stage",
           "parse_eps", "parse_eps_list", "read_report", "render_markdown", "score_detectors", "write_report"]
