"""Adaptive packet-filter rule management driven by a learned anomaly score.

Submodules: ``traffic`` (flow records, features, windows), ``nn`` (numpy
layers and optimizers), ``detector`` (sequence anomaly scorer),
``firewall`` (rule engine and deltas), ``agent`` (DQN), ``env`` (the
firewall environment) and ``harness`` (config, metrics, CLI pipeline).
"""
from .errors import ConfigError, DeltaError, ShapeError, StateError, UsageError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DeltaError", "ShapeError", "StateError", "UsageError", "__version__"]
