"""Declarative experiment runner.

Run: uv run python -m lowdim_feedback.runner run configs/linear_full_rank_fa.toml
     uv run ldfa validate configs/linear_normative.toml
"""

from .core import EXIT_COMPARISON, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, RunManifest, aggregate, main, run
from .experiments import RunResult, run_single
from .schema import ExperimentConfig, parse_config, validate_config

__all__ = [
    "run",
    "main",
    "aggregate",
    "run_single",
    "parse_config",
    "validate_config",
    "ExperimentConfig",
    "RunManifest",
    "RunResult",
    "EXIT_OK",
    "EXIT_CONFIG",
    "EXIT_DIVERGENCE",
    "EXIT_COMPARISON",
]
