"""Experiment harness: config files, learning-rate search, sweeps, reports."""

from .config import ExperimentConfig, load_config
from .lrsearch import lr_search
from .sweep import run_sweep
from .report import emit_report

__all__ = ["ExperimentConfig", "load_config", "lr_search", "run_sweep", "emit_report"]
