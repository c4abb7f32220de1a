"""Experiment harness: configuration, desk-scale experiments and the CLI."""
from .config import ConfigError, RunConfig
from .experiments import (
    COMMANDS,
    NumericalFailure,
    ResultTable,
    cmd_bias_bench,
    cmd_fit_ppca,
    cmd_meeting_times,
    cmd_toy_trace,
)
