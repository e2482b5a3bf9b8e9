"""Experiment configuration loaded from YAML.

The file is a mapping of sections (``agent``, ``env``, ``rewards``,
``detector``, ``run``, ``traffic`` and the four synthetic-traffic sections)
to key/value pairs. Scalar keys may also appear at top level, in which case
they resolve to the first section that defines them, searched in the order
of ``FLAT_KEY_ORDER``. The agent seed always follows ``run.seed``.
Missing keys keep their defaults; unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..agent import AgentConfig
from ..detector import DetectorHyper
from ..env import EnvConfig, RewardWeights
from ..errors import ConfigError
from ..traffic import FlowSchema, SyntheticConfig


@dataclass
class EnvSettings:
    interval: float = 1.0
    anomaly_threshold: float = 0.7
    max_rules: int = 32
    widen_prefix: int = 24


@dataclass
class RunSettings:
    total_steps: int = 5000
    eval_every: int = 0
    seed: int = 0
    output_dir: str = "runs/default"
    calibration_intervals: int = 60
    detector_checkpoint: str = ""


@dataclass
class TrafficSource:
    source: str = "synthetic"
    csv_path: str = ""
    feature_mode: str = "engineered"
    train_fraction: float = 0.7
    episode_seconds: float = 100.0
    schema: dict = field(default_factory=dict)


def _detector_traffic():
    return SyntheticConfig(duration=300.0, n_attackers=4, attack_start=30.0)


def _episode_traffic():
    # training episodes rotate attackers and recycle retired addresses as benign hosts,
    # so stale deny rules carry a cost the agent can learn to clean up
    return SyntheticConfig(duration=100.0, n_attackers=3, attack_start=20.0, switch_every=30.0,
                           reuse_retired_attackers=True)


def _eval_traffic():
    return SyntheticConfig(n_flows=1000, n_attackers=2, attack_start=15.0)


def _compare_traffic():
    return SyntheticConfig(duration=240.0, n_attackers=3, attack_start=20.0, switch_every=60.0,
                           reuse_retired_attackers=True)


@dataclass
class ExperimentConfig:
    agent: AgentConfig = field(default_factory=AgentConfig)
    detector: DetectorHyper = field(default_factory=DetectorHyper)
    env: EnvSettings = field(default_factory=EnvSettings)
    rewards: RewardWeights = field(default_factory=RewardWeights)
    run: RunSettings = field(default_factory=RunSettings)
    traffic: TrafficSource = field(default_factory=TrafficSource)
    detector_traffic: SyntheticConfig = field(default_factory=_detector_traffic)
    episode_traffic: SyntheticConfig = field(default_factory=_episode_traffic)
    eval_traffic: SyntheticConfig = field(default_factory=_eval_traffic)
    compare_traffic: SyntheticConfig = field(default_factory=_compare_traffic)
    # agent keys set by the file; schedule lengths not listed here follow total_steps
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def env_config(self) -> EnvConfig:
        return EnvConfig(self.env.interval, self.env.anomaly_threshold, self.env.max_rules,
                         self.env.widen_prefix, self.rewards)

    def agent_config(self) -> AgentConfig:
        """Agent settings with schedule lengths tied to ``total_steps`` unless set."""
        cfg = dataclasses.replace(self.agent)
        steps = max(self.run.total_steps, 1)
        if "epsilon_decay_steps" not in self.explicit:
            cfg.epsilon_decay_steps = max(1, int(round(0.35 * steps)))
        if "beta_anneal_steps" not in self.explicit:
            cfg.beta_anneal_steps = steps
        cfg.seed = self.run.seed
        return cfg

    def schema(self) -> FlowSchema:
        raw = dict(self.traffic.schema)
        for key in ("feature_columns", "benign_labels"):
            if key in raw:
                raw[key] = tuple(raw[key])
        try:
            return FlowSchema(**raw)
        except TypeError as exc:
            raise ConfigError(f"traffic.schema: {exc}") from exc

    def validate(self) -> None:
        self.agent.validate()
        self.detector.validate()
        self.env_config().validate()
        for name in ("detector_traffic", "episode_traffic", "eval_traffic", "compare_traffic"):
            try:
                getattr(self, name).validate()
            except ConfigError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        r = self.run
        if r.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if r.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if r.calibration_intervals < 0:
            raise ConfigError("calibration_intervals must be >= 0")
        if r.seed < 0:
            raise ConfigError("seed must be >= 0")
        t = self.traffic
        if t.source not in ("synthetic", "csv"):
            raise ConfigError("traffic.source must be 'synthetic' or 'csv'")
        if t.source == "csv" and not t.csv_path:
            raise ConfigError("traffic.csv_path is required when traffic.source is 'csv'")
        if t.feature_mode not in ("engineered", "passthrough"):
            raise ConfigError("traffic.feature_mode must be 'engineered' or 'passthrough'")
        if not 0.0 < t.train_fraction < 1.0:
            raise ConfigError("traffic.train_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        """Plain mapping that reloads to the same configuration.

        The agent section holds the resolved schedule and omits the seed,
        which follows ``run.seed``.
        """
        out = {}
        for f in fields(self):
            if f.name == "explicit":
                continue
            section = self.agent_config() if f.name == "agent" else getattr(self, f.name)
            out[f.name] = {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in asdict(section).items()}
        del out["agent"]["seed"]
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


SECTIONS = ("agent", "detector", "env", "rewards", "run", "traffic", "detector_traffic",
            "episode_traffic", "eval_traffic", "compare_traffic")
FLAT_KEY_ORDER = ("run", "agent", "env", "rewards", "detector", "traffic")


_NULLABLE = {"n_flows": int, "attack_stop": float}


def _coerce(name: str, key: str, value: Any, current: Any) -> Any:
    kind = _NULLABLE.get(key, type(current))
    if key in _NULLABLE and value is None:
        return None
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and value == int(value)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is tuple:
        ok = isinstance(value, (list, tuple))
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{name} must be of type {kind.__name__}, got {value!r}")
    return kind(value)


def _apply(cfg: ExperimentConfig, section: str, key: str, value: Any) -> None:
    target = getattr(cfg, section)
    known = {f.name: f for f in fields(target)}
    if key not in known or (section, key) == ("agent", "seed"):
        raise ConfigError(f"unknown key {section}.{key}")
    setattr(target, key, _coerce(f"{section}.{key}", key, value, getattr(target, key)))
    if section == "agent":
        cfg.explicit.add(key)


def config_from_dict(data: dict | None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if not data:
        cfg.validate()
        return cfg
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping of keys to values")
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            for k, v in value.items():
                _apply(cfg, key, k, v)
            continue
        for section in FLAT_KEY_ORDER:
            if key in {f.name for f in fields(getattr(cfg, section))}:
                _apply(cfg, section, key, value)
                break
        else:
            raise ConfigError(f"unknown key {key!r}")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a YAML experiment file; ``None`` gives the defaults."""
    if path is None:
        return config_from_dict(None)
    p = Path(path)
    text = p.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: parse failure: {exc}") from exc
    return config_from_dict(data)


QUICKSTART = {
    "run": {"total_steps": 5000, "seed": 0, "output_dir": "runs/quickstart"},
}


def quickstart_config() -> ExperimentConfig:
    return config_from_dict(QUICKSTART)
