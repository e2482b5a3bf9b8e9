"""Experiment pipeline: detector training, agent training, evaluation, comparison."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..agent import DQNAgent, build_mlp
from ..detector import DetectorHyper, DetectorModel, TrainReport, train
from ..env import ACTION_CATALOG, EvalLog, FirewallEnv, StepLog, TrainingLog, evaluate_policy, run_training
from ..errors import ConfigError, UsageError
from ..firewall import AddrMatch, Match, Rule, RuleSet, Verdict, save_ruleset, timed_evaluate
from ..nn import (LSTM, Conv1D, Dense, GradCheckReport, bce_with_logits, gradient_check,
                  load_params, save_params, weighted_half_mse)
from ..traffic import (FeatureExtractor, FlowRecord, Normalizer, SyntheticConfig,
                       generate_synthetic, parse_flow_csv, source_window_labels, source_windows)
from .config import ExperimentConfig
from .metrics import (MetricsRecord, compute_metrics, confusion_metrics, write_comparison_csv,
                      write_gradcheck, write_metrics_csv, write_reward_curve,
                      write_snapshots)

log = logging.getLogger(__name__)


def derive_seed(base: int, *parts: int) -> int:
    return int(np.random.SeedSequence([base, *parts]).generate_state(1)[0])


@dataclass
class TrafficPlan:
    detector_train: list[FlowRecord]
    detector_val: list[FlowRecord]
    episode: Callable[[int], list[FlowRecord]]
    evaluation: list[FlowRecord]
    comparison: list[FlowRecord]


def _chunks(records: Sequence[FlowRecord], seconds: float) -> list[list[FlowRecord]]:
    out: list[list[FlowRecord]] = []
    start = None
    for r in records:
        if start is None or r.timestamp >= start + seconds:
            out.append([])
            start = r.timestamp
        out[-1].append(r)
    return [c for c in out if len(c) > 1]


def plan_traffic(cfg: ExperimentConfig) -> TrafficPlan:
    seed = cfg.run.seed
    if cfg.traffic.source == "synthetic":
        def synth(sc: SyntheticConfig, *parts: int) -> list[FlowRecord]:
            return generate_synthetic(sc, derive_seed(seed, *parts))

        return TrafficPlan(
            detector_train=synth(cfg.detector_traffic, 1),
            detector_val=synth(cfg.detector_traffic, 2),
            episode=lambda k: synth(cfg.episode_traffic, 3, k),
            evaluation=synth(cfg.eval_traffic, 4),
            comparison=synth(cfg.compare_traffic, 5),
        )
    reader = parse_flow_csv(cfg.traffic.csv_path, cfg.schema())
    records = sorted(reader, key=lambda r: r.timestamp)
    if reader.skipped:
        log.warning("skipped %d malformed rows in %s", reader.skipped, cfg.traffic.csv_path)
    n_train = int(len(records) * cfg.traffic.train_fraction)
    train_part, test_part = records[:n_train], records[n_train:]
    n_det = int(len(train_part) * 0.8)
    episodes = _chunks(train_part, cfg.traffic.episode_seconds)
    if not episodes or not test_part or n_det == 0:
        raise ConfigError("CSV traffic is too short to split into training and evaluation parts")
    return TrafficPlan(train_part[:n_det], train_part[n_det:],
                       lambda k: episodes[k % len(episodes)], test_part, test_part)


def window_dataset(records: Sequence[FlowRecord], normalizer: Normalizer, window: int,
                   mode: str = "engineered", rule: str = "any") -> tuple[np.ndarray, np.ndarray]:
    raw = FeatureExtractor(mode).raw_matrix(records)
    feats = normalizer.transform(raw)
    return source_windows(records, feats, window), source_window_labels(records, window, rule)


def score_stream(records: Sequence[FlowRecord], detector: DetectorModel, normalizer: Normalizer,
                 mode: str = "engineered") -> np.ndarray:
    """Per-flow scores computed exactly as the environment computes them."""
    x, _ = window_dataset(records, normalizer, detector.hyper.window, mode)
    return detector.score_batch(x)


def train_detector(cfg: ExperimentConfig, plan: TrafficPlan
                   ) -> tuple[DetectorModel, Normalizer, TrainReport]:
    mode = cfg.traffic.feature_mode
    normalizer = Normalizer().fit(FeatureExtractor(mode).raw_matrix(plan.detector_train))
    hyper = dataclasses.replace(cfg.detector, input_dim=normalizer.dim)
    detector = DetectorModel(hyper, seed=derive_seed(cfg.run.seed, 6))
    x, y = window_dataset(plan.detector_train, normalizer, hyper.window, mode, hyper.label_rule)
    val = window_dataset(plan.detector_val, normalizer, hyper.window, mode, hyper.label_rule)
    report = train(detector, x, y, seed=derive_seed(cfg.run.seed, 7), validation=val)
    return detector, normalizer, report


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_detector(directory: Path, detector: DetectorModel, normalizer: Normalizer) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_params(directory / "detector.params", detector.state_dict())
    save_params(directory / "normalizer.params", normalizer.state_dict())
    meta = {"format": "dynfw-detector-meta", "version": 1,
            "hyper": dataclasses.asdict(detector.hyper)}
    (directory / "detector_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_detector(directory: str | Path) -> tuple[DetectorModel, Normalizer]:
    d = Path(directory)
    meta_path = d / "detector_meta.json"
    if not meta_path.exists():
        raise UsageError(f"no detector checkpoint at {meta_path}")
    meta = json.loads(meta_path.read_text())
    detector = DetectorModel(DetectorHyper(**meta["hyper"]))
    detector.load_state_dict(load_params(d / "detector.params"))
    normalizer = Normalizer.from_state_dict(load_params(d / "normalizer.params"))
    return detector, normalizer


def load_checkpoints(directory: str | Path) -> tuple[DetectorModel, Normalizer, DQNAgent]:
    detector, normalizer = load_detector(directory)
    return detector, normalizer, DQNAgent.load(directory)


# --------------------------------------------------------------------------
# Pipeline stages
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    detector: DetectorModel
    normalizer: Normalizer
    agent: DQNAgent
    detector_report: TrainReport
    train_log: TrainingLog
    eval_log: EvalLog
    train_metrics: MetricsRecord | None
    eval_metrics: MetricsRecord


def _snapshot(step: int, elog: EvalLog) -> dict:
    tp, fp, tn, fn = elog.totals()
    acc, fpr, det = confusion_metrics(tp, fp, tn, fn)
    rules = elog.steps[-1].rule_count if elog.steps else 0
    return {"step": step, "flows": tp + fp + tn + fn, "accuracy": acc, "fpr": fpr,
            "detection_rate": det, "rule_count": rules}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunResult:
    """Train detector and agent, evaluate greedily, and write all run artifacts."""
    out = Path(out_dir or cfg.run.output_dir)
    ckpt = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    plan = plan_traffic(cfg)

    if cfg.run.detector_checkpoint:
        detector, normalizer = load_detector(cfg.run.detector_checkpoint)
        report = TrainReport()
    else:
        detector, normalizer, report = train_detector(cfg, plan)
    report.to_csv(out / "detector_report.csv")
    log.info("detector trained: %s", [round(e.loss, 4) for e in report.epochs])

    env_cfg = cfg.env_config()
    mode = cfg.traffic.feature_mode
    env = FirewallEnv(detector, normalizer, env_cfg, mode)
    agent = DQNAgent(env.state_dim, env.n_actions, cfg.agent_config())

    snapshots: list[dict] = []
    on_step = None
    if cfg.run.eval_every > 0:
        probe = FirewallEnv(detector, normalizer, env_cfg, mode)

        def on_step(t: int, _log: TrainingLog) -> None:
            if t % cfg.run.eval_every == 0:
                snapshots.append(_snapshot(t, evaluate_policy(agent, probe, plan.evaluation)))

    train_log = run_training(agent, env, plan.episode, cfg.run.total_steps, on_step)
    train_log.snapshots = snapshots
    eval_log = evaluate_policy(agent, FirewallEnv(detector, normalizer, env_cfg, mode),
                               plan.evaluation)

    train_metrics = compute_metrics(train_log) if len(train_log) else None
    eval_metrics = compute_metrics(eval_log)
    train_log.to_csv(out / "train_log.csv")
    write_reward_curve(out / "reward_curve.csv", train_log.rewards())
    rows = [("train", train_metrics)] if train_metrics else []
    write_metrics_csv(out / "metrics.csv", rows + [("eval", eval_metrics)])
    if snapshots:
        write_snapshots(out / "eval_snapshots.csv", snapshots)
    save_detector(ckpt, detector, normalizer)
    agent.save(ckpt)
    (ckpt / "config.yaml").write_text(cfg.dump())
    return RunResult(detector, normalizer, agent, report, train_log, eval_log,
                     train_metrics, eval_metrics)


def run_eval(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> MetricsRecord:
    """Greedy replay of the evaluation traffic with checkpointed models."""
    out = Path(out_dir or cfg.run.output_dir)
    detector, normalizer, agent = load_checkpoints(out / "checkpoints")
    env = FirewallEnv(detector, normalizer, cfg.env_config(), cfg.traffic.feature_mode)
    elog = evaluate_policy(agent, env, plan_traffic(cfg).evaluation)
    metrics = compute_metrics(elog)
    TrainingLog(elog.steps).to_csv(out / "eval_log.csv")
    write_metrics_csv(out / "eval_metrics.csv", [("eval", metrics)])
    save_ruleset(out / "eval_final_rules.txt", env.ruleset)
    return metrics


def baseline_ruleset(records: Sequence[FlowRecord], scores: np.ndarray, calibration_intervals: int,
                     interval: float, threshold: float) -> RuleSet:
    """Static set denying every source that scored above ``threshold`` in the prefix."""
    if not records or calibration_intervals == 0:
        return RuleSet()
    first = int(records[0].timestamp // interval)
    sources: list[int] = []
    for rec, s in zip(records, scores):
        if int(rec.timestamp // interval) - first >= calibration_intervals:
            break
        if s > threshold and rec.src_addr not in sources:
            sources.append(rec.src_addr)
    return RuleSet([Rule(i + 1, Match(src=AddrMatch.exact(a)), Verdict.DENY)
                    for i, a in enumerate(sources)])


def replay_static(ruleset: RuleSet, env: FirewallEnv, records: Sequence[FlowRecord]) -> EvalLog:
    """Replay the counted intervals (all but the first) through a fixed rule set."""
    elog = EvalLog()
    for t, chunk in enumerate(env.split_intervals(records)[1:], start=1):
        tp = fp = tn = fn = 0
        ns = 0
        for rec in chunk:
            decision, dt = timed_evaluate(ruleset, rec, t)
            ns += dt
            deny = decision.verdict is Verdict.DENY
            if rec.is_malicious:
                tp, fn = tp + deny, fn + (not deny)
            else:
                fp, tn = fp + deny, tn + (not deny)
        elog.steps.append(StepLog(t, 0.0, 0.0, None, tp, fp, tn, fn, len(ruleset), False, ns))
    return elog


def compare_baseline(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                     checkpoints: str | Path | None = None) -> dict[str, MetricsRecord]:
    """Learned policy vs. static-threshold rule set on the same replay."""
    out = Path(out_dir or cfg.run.output_dir)
    detector, normalizer, agent = load_checkpoints(checkpoints or out / "checkpoints")
    mode = cfg.traffic.feature_mode
    records = plan_traffic(cfg).comparison
    env = FirewallEnv(detector, normalizer, cfg.env_config(), mode)
    learned = evaluate_policy(agent, env, records)
    scores = score_stream(records, detector, normalizer, mode)
    static = baseline_ruleset(records, scores, cfg.run.calibration_intervals,
                              cfg.env.interval, cfg.env.anomaly_threshold)
    baseline = replay_static(static, env, records)
    result = {"adaptive": compute_metrics(learned), "static_threshold": compute_metrics(baseline)}
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(out / "comparison.csv", list(result.items()))
    return result


# --------------------------------------------------------------------------
# Gradient checks
# --------------------------------------------------------------------------

def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference checks for each layer type and both composed models."""
    rng = np.random.default_rng([seed, 11])
    hyper = DetectorHyper(input_dim=8, hidden=4, kernel_width=3, channels=3, window=6)
    detector = DetectorModel(hyper, seed=derive_seed(seed, 12))
    x_det = rng.normal(size=(3, 6, 8))
    y_det = np.array([[1.0], [0.0], [1.0]])
    qnet = build_mlp(38, (16, 16), len(ACTION_CATALOG), rng)
    x_q = rng.normal(size=(4, 38))
    y_q = rng.normal(size=(4, len(ACTION_CATALOG)))

    def sq(out, target):
        return weighted_half_mse(out, target)

    cases = [
        ("dense", Dense(5, 3, rng), rng.normal(size=(4, 5)), rng.normal(size=(4, 3)), sq),
        ("conv1d", Conv1D(3, 2, 2, rng), rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 4, 2)), sq),
        ("lstm", LSTM(3, 4, rng), rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 5, 4)), sq),
        ("detector", detector.net, x_det, y_det, bce_with_logits),
        ("qnetwork", qnet, x_q, y_q, sq),
    ]
    return [(name, gradient_check(model, loss, x, y, tolerance))
            for name, model, x, y, loss in cases]


def run_gradcheck(seed: int = 0, out_dir: str | Path | None = None) -> list[tuple[str, GradCheckReport]]:
    reports = gradcheck_suite(seed)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_gradcheck(Path(out_dir) / "gradcheck.csv", reports)
    return reports
