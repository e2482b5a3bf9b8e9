"""Configuration, metrics and experiment orchestration."""
from .config import ExperimentConfig, config_from_dict, load_config, quickstart_config
from .experiment import (compare_baseline, gradcheck_suite, run_eval, run_experiment,
                         run_gradcheck)
from .metrics import MetricsRecord, compute_metrics

__all__ = [
    "ExperimentConfig", "MetricsRecord", "compare_baseline", "compute_metrics",
    "config_from_dict", "gradcheck_suite", "load_config", "quickstart_config", "run_eval",
    "run_experiment", "run_gradcheck",
]
