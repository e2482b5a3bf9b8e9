"""Closed-loop firewall environment and the DQN training loop.

Time is cut into fixed simulated intervals (default one second of flow
timestamps). Each ``step`` takes one action chosen from the observation of
interval ``t``, applies the resulting rule delta, then replays the flows
of interval ``t + 1`` through the updated rule set and scores them. The
first interval of an episode is observed during ``reset`` and is not
counted in the confusion totals.

A flow's anomaly score is the detector output for its source's last ``W``
flows (see :func:`dynfw.traffic.source_windows`). The *focus* flow of an
interval is the highest-scoring flow that the firewall let through; the
source-targeted actions act on it.
"""
from __future__ import annotations

import csv
import enum
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .agent import DQNAgent, Transition
from .detector import DetectorModel
from .errors import ConfigError, StateError
from .firewall import (AddrMatch, DeltaKind, Match, PortMatch, Rule, RuleDelta, RuleSet,
                       Verdict, apply_delta, evaluate, redundancy_scan)
from .traffic import FeatureExtractor, FlowRecord, Normalizer


class Action(enum.IntEnum):
    NOOP = 0
    DENY_SRC = 1
    DENY_SRC_DPORT = 2
    WIDEN_TOP = 3
    REMOVE_OLDEST = 4
    REMOVE_COLDEST = 5
    PROMOTE_HOT = 6


ACTION_CATALOG: tuple[Action, ...] = tuple(Action)
DENY_ACTIONS = frozenset({Action.DENY_SRC, Action.DENY_SRC_DPORT, Action.WIDEN_TOP})


@dataclass
class RewardWeights:
    w_tp: float = 2.0
    w_fp: float = 3.0
    w_fn: float = 2.0
    w_tn: float = 0.01
    p_inf: float = 1.0
    p_red: float = 1.0
    shaping: float = 0.5
    bound: float = 10.0


def reward(tp: int, fp: int, tn: int, fn: int, infeasible: bool = False,
           redundant: bool = False, omega_mean: float = 0.5, deny_action: bool = False,
           weights: RewardWeights | None = None) -> float:
    """Shaped step reward clamped to ``[-bound, +bound]``."""
    w = weights or RewardWeights()
    raw = (w.w_tp * tp - w.w_fp * fp - w.w_fn * fn + w.w_tn * tn
           - w.p_inf * infeasible - w.p_red * redundant
           + w.shaping * (omega_mean - 0.5) * (1.0 if deny_action else -1.0))
    return float(min(max(raw, -w.bound), w.bound))


@dataclass
class EnvConfig:
    interval: float = 1.0
    anomaly_threshold: float = 0.7
    max_rules: int = 32
    widen_prefix: int = 24
    weights: RewardWeights = field(default_factory=RewardWeights)

    def validate(self):
        if self.interval <= 0:
            raise ConfigError("env.interval must be positive")
        if not 0.0 <= self.anomaly_threshold <= 1.0:
            raise ConfigError("anomaly_threshold must lie in [0, 1]")
        if self.max_rules < 1:
            raise ConfigError("max_rules must be >= 1")
        if not 0 <= self.widen_prefix <= 32:
            raise ConfigError("widen_prefix must lie in [0, 32]")
        if self.weights.bound <= 0:
            raise ConfigError("reward bound must be positive")


@dataclass
class EnvState:
    window_aggregates: np.ndarray
    omega_stats: np.ndarray
    firewall_summary: np.ndarray
    step_index: int = 0

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.window_aggregates, self.omega_stats, self.firewall_summary])


def state_dim(feature_dim: int) -> int:
    return 2 * feature_dim + 6


def build_state(window: np.ndarray | None, scores: Sequence[float], ruleset: RuleSet,
                denied: Sequence[bool], config: EnvConfig | None = None,
                step_index: int = 0, feature_dim: int | None = None) -> EnvState:
    """Assemble the agent observation for one interval.

    ``window`` is the focus flow's ``(W, D)`` window (``None`` when every
    flow was denied or the interval was empty); ``scores`` and ``denied``
    are aligned per flow of the interval.
    """
    config = config or EnvConfig()
    scores = np.asarray(scores, dtype=np.float64)
    denied = np.asarray(denied, dtype=bool)
    if scores.shape != denied.shape:
        raise ConfigError("scores and denied flags must align")
    if window is None:
        if feature_dim is None:
            raise ConfigError("feature_dim is required when there is no focus window")
        agg = np.zeros(2 * feature_dim)
    else:
        window = np.asarray(window, dtype=np.float64)
        if feature_dim is not None and window.shape[1] != feature_dim:
            raise ConfigError(f"window has {window.shape[1]} features, expected {feature_dim}")
        agg = np.concatenate([window.mean(axis=0), window.max(axis=0)])
    allowed = scores[~denied]
    if len(allowed):
        omega = np.array([allowed.max(), allowed.mean(),
                          np.mean(allowed > config.anomaly_threshold)])
    else:
        omega = np.zeros(3)
    n = len(scores)
    n_denied = int(denied.sum())
    fp_estimate = float(np.mean(scores[denied] <= config.anomaly_threshold)) if n_denied else 0.0
    fw = np.array([len(ruleset) / config.max_rules, n_denied / n if n else 0.0, fp_estimate])
    return EnvState(agg, omega, fw, step_index)


@dataclass(frozen=True)
class Decoded:
    delta: RuleDelta
    infeasible: bool = False


def _deny_rules(ruleset: RuleSet) -> list[tuple[int, Rule]]:
    return [(i, r) for i, r in enumerate(ruleset.rules) if r.verdict is Verdict.DENY]


def decode_action(action: int, focus: FlowRecord | None, ruleset: RuleSet, step: int = 0,
                  config: EnvConfig | None = None) -> Decoded:
    """Instantiate an action template against the current context.

    Templates whose target does not exist (or that would exceed
    ``max_rules``) decode to an infeasible NOOP.
    """
    config = config or EnvConfig()
    act = Action(action)
    infeasible = Decoded(RuleDelta.noop(), True)
    if act is Action.NOOP:
        return Decoded(RuleDelta.noop())
    if act in (Action.DENY_SRC, Action.DENY_SRC_DPORT):
        if focus is None or len(ruleset) >= config.max_rules:
            return infeasible
        match = Match(src=AddrMatch.exact(focus.src_addr))
        if act is Action.DENY_SRC_DPORT:
            match = Match(src=match.src, dport=PortMatch(focus.dst_port, focus.dst_port))
        rule = Rule(ruleset.next_id(), match, Verdict.DENY, created_step=step)
        return Decoded(RuleDelta.insert(rule, 0))
    denies = _deny_rules(ruleset)
    if act is Action.WIDEN_TOP:
        if not denies:
            return infeasible
        _, newest = max(denies, key=lambda ir: (ir[1].created_step, ir[1].id))
        src = newest.match.src
        if src.prefix <= config.widen_prefix:
            return infeasible
        widened = Match(AddrMatch.covering(src.network, config.widen_prefix), newest.match.dst,
                        newest.match.sport, newest.match.dport, newest.match.protos)
        return Decoded(RuleDelta.update(newest.id, widened))
    if act is Action.REMOVE_OLDEST:
        if not denies:
            return infeasible
        _, oldest = min(denies, key=lambda ir: (ir[1].created_step, ir[1].id))
        return Decoded(RuleDelta.remove(oldest.id))
    if act is Action.REMOVE_COLDEST:
        if not denies:
            return infeasible
        _, coldest = min(denies, key=lambda ir: (
            -1 if ir[1].last_match_step is None else ir[1].last_match_step,
            ir[1].created_step, ir[1].id))
        return Decoded(RuleDelta.remove(coldest.id))
    # PROMOTE_HOT
    if not ruleset.rules:
        return infeasible
    hot = max(ruleset.rules, key=lambda r: r.match_count)
    return Decoded(RuleDelta.reorder(hot.id, 0))


def delta_is_redundant(before: RuleSet, after: RuleSet, delta: RuleDelta) -> bool:
    """A delta is redundant when it leaves a dead rule or changes nothing."""
    if delta.kind in (DeltaKind.INSERT, DeltaKind.UPDATE):
        target = delta.rule.id if delta.kind is DeltaKind.INSERT else delta.target_id
        return any(rid == target for rid, _ in redundancy_scan(after))
    if delta.kind is DeltaKind.REORDER:
        return before.ids() == after.ids()
    return False


@dataclass
class StepOutcome:
    reward: float
    tp: int
    fp: int
    tn: int
    fn: int
    action: int
    delta_applied: RuleDelta
    delta_was_redundant: bool
    infeasible: bool
    decision_latency_ns: int
    rule_count: int

    @property
    def flows(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class _Interval:
    records: list[FlowRecord]
    scores: np.ndarray
    denied: np.ndarray
    windows: np.ndarray
    focus: int | None


class FirewallEnv:
    """Replays a flow stream through a rule set driven by discrete actions."""

    def __init__(self, detector: DetectorModel, normalizer: Normalizer,
                 config: EnvConfig | None = None, feature_mode: str = "engineered"):
        self.detector = detector
        self.normalizer = normalizer
        self.config = config or EnvConfig()
        self.config.validate()
        self.feature_mode = feature_mode
        self.window = detector.hyper.window
        self.feature_dim = detector.hyper.input_dim
        if normalizer.dim != self.feature_dim:
            raise ConfigError(f"normalizer has {normalizer.dim} dims, detector expects {self.feature_dim}")
        self.n_actions = len(ACTION_CATALOG)
        self.state_dim = state_dim(self.feature_dim)
        self.ruleset = RuleSet()
        self._intervals: list[list[FlowRecord]] = []
        self._cursor = 0
        self._current: _Interval | None = None

    # -- episode bookkeeping ------------------------------------------------

    @property
    def done(self) -> bool:
        return self._cursor >= len(self._intervals) - 1

    @property
    def steps_available(self) -> int:
        return max(len(self._intervals) - 1, 0)

    def split_intervals(self, records: Sequence[FlowRecord]) -> list[list[FlowRecord]]:
        if not records:
            return []
        stamps = np.array([r.timestamp for r in records])
        if np.any(np.diff(stamps) < 0):
            raise ConfigError("flow timestamps must be non-decreasing")
        dt = self.config.interval
        first = int(stamps[0] // dt)
        out: list[list[FlowRecord]] = [[] for _ in range(int(stamps[-1] // dt) - first + 1)]
        for r in records:
            out[int(r.timestamp // dt) - first].append(r)
        return out

    def reset(self, records: Sequence[FlowRecord], ruleset: RuleSet | None = None) -> EnvState:
        self._intervals = self.split_intervals(records)
        if not self._intervals:
            raise ConfigError("episode has no flows")
        self.ruleset = ruleset.copy() if ruleset is not None else RuleSet()
        self._extractor = FeatureExtractor(self.feature_mode)
        self._history: dict[int, deque] = {}
        self._cursor = 0
        self._current, _, _ = self._ingest(self._intervals[0], step=0)
        return self._observe()

    # -- per-interval processing --------------------------------------------

    def _ingest(self, records: list[FlowRecord], step: int):
        n = len(records)
        W, D = self.window, self.feature_dim
        windows = np.empty((n, W, D))
        denied = np.zeros(n, dtype=bool)
        eval_ns = 0
        for i, rec in enumerate(records):
            vec = self.normalizer.transform(self._extractor.raw(rec))
            h = self._history.setdefault(rec.src_addr, deque(maxlen=W))
            h.append(vec)
            rows = list(h)
            if len(rows) < W:
                rows = [rows[0]] * (W - len(rows)) + rows
            windows[i] = rows
            t0 = time.perf_counter_ns()
            denied[i] = evaluate(self.ruleset, rec, step).verdict is Verdict.DENY
            eval_ns += time.perf_counter_ns() - t0
        scores = self.detector.score_batch(windows)
        allowed = np.flatnonzero(~denied)
        focus = int(allowed[np.argmax(scores[allowed])]) if len(allowed) else None
        return _Interval(records, scores, denied, windows, focus), eval_ns, self._confusion(records, denied)

    @staticmethod
    def _confusion(records, denied) -> tuple[int, int, int, int]:
        tp = fp = tn = fn = 0
        for rec, d in zip(records, denied):
            if rec.is_malicious:
                tp += d
                fn += not d
            else:
                fp += d
                tn += not d
        return int(tp), int(fp), int(tn), int(fn)

    def _observe(self) -> EnvState:
        cur = self._current
        window = None if cur.focus is None else cur.windows[cur.focus]
        return build_state(window, cur.scores, self.ruleset, cur.denied, self.config,
                           self._cursor, self.feature_dim)

    @property
    def focus_record(self) -> FlowRecord | None:
        cur = self._current
        return None if cur is None or cur.focus is None else cur.records[cur.focus]

    def focus_omega_mean(self) -> float:
        """Mean score of the focus source's let-through flows in the current interval."""
        cur = self._current
        if cur is None or cur.focus is None:
            return 0.5
        src = cur.records[cur.focus].src_addr
        sel = [s for r, s, d in zip(cur.records, cur.scores, cur.denied)
               if r.src_addr == src and not d]
        return float(np.mean(sel))

    def step(self, action: int) -> tuple[EnvState, StepOutcome]:
        if self.done:
            raise StateError("episode is exhausted; check `done` and call reset()")
        step_no = self._cursor + 1
        omega_mean = self.focus_omega_mean()
        t0 = time.perf_counter_ns()
        decoded = decode_action(action, self.focus_record, self.ruleset, step_no, self.config)
        before = self.ruleset
        self.ruleset = apply_delta(before, decoded.delta)
        apply_ns = time.perf_counter_ns() - t0
        redundant = delta_is_redundant(before, self.ruleset, decoded.delta)
        self._cursor = step_no
        self._current, eval_ns, (tp, fp, tn, fn) = self._ingest(self._intervals[step_no], step_no)
        deny = Action(action) in DENY_ACTIONS and not decoded.infeasible
        r = reward(tp, fp, tn, fn, decoded.infeasible, redundant, omega_mean, deny,
                   self.config.weights)
        outcome = StepOutcome(r, tp, fp, tn, fn, int(action), decoded.delta, redundant,
                              decoded.infeasible, apply_ns + eval_ns, len(self.ruleset))
        return self._observe(), outcome


# --------------------------------------------------------------------------
# Training and evaluation loops
# --------------------------------------------------------------------------

TRAIN_LOG_COLUMNS = ("step", "epsilon", "reward", "loss", "tp", "fp", "tn", "fn",
                     "rule_count", "redundant_flag", "latency_ns")


@dataclass
class StepLog:
    step: int
    epsilon: float
    reward: float
    loss: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    rule_count: int
    redundant_flag: bool
    latency_ns: int
    rule_update: bool = False

    def row(self) -> list:
        return [self.step, repr(self.epsilon), repr(self.reward),
                "" if self.loss is None else repr(self.loss),
                self.tp, self.fp, self.tn, self.fn, self.rule_count,
                int(self.redundant_flag), self.latency_ns]


@dataclass
class TrainingLog:
    steps: list[StepLog] = field(default_factory=list)
    sync_steps: list[int] = field(default_factory=list)
    episodes: int = 0
    snapshots: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAIN_LOG_COLUMNS)
            for s in self.steps:
                w.writerow(s.row())


def _log_entry(step: int, eps: float, loss, out: StepOutcome, latency: int) -> StepLog:
    return StepLog(step, eps, out.reward, loss, out.tp, out.fp, out.tn, out.fn, out.rule_count,
                   out.delta_was_redundant, latency, out.delta_applied.kind is not DeltaKind.NOOP)


def run_training(agent: DQNAgent, env: FirewallEnv, episodes: Callable[[int], Sequence[FlowRecord]],
                 total_steps: int, on_step: Callable[[int, TrainingLog], None] | None = None
                 ) -> TrainingLog:
    """Observe, act epsilon-greedily, apply, reward, store, learn, sync.

    ``episodes(k)`` supplies the flow stream of the ``k``-th episode; a new
    episode starts (with an empty rule set) whenever the current stream is
    exhausted. Episode ends are time-limit truncations, so bootstrapping is
    not cut at the boundary.
    """
    log = TrainingLog()
    if total_steps <= 0:
        return log
    state = env.reset(episodes(0))
    log.episodes = 1
    for t in range(1, total_steps + 1):
        while env.done:
            state = env.reset(episodes(log.episodes))
            log.episodes += 1
        t0 = time.perf_counter_ns()
        action, eps = agent.act(state.vector)
        act_ns = time.perf_counter_ns() - t0
        next_state, out = env.step(action)
        loss = agent.observe(Transition(state.vector, action, out.reward, next_state.vector))
        log.steps.append(_log_entry(t, eps, loss, out, act_ns + out.decision_latency_ns))
        state = next_state
        if on_step is not None:
            on_step(t, log)
    log.sync_steps = list(agent.sync_steps)
    return log


@dataclass
class EvalLog:
    steps: list[StepLog] = field(default_factory=list)

    def totals(self) -> tuple[int, int, int, int]:
        return (sum(s.tp for s in self.steps), sum(s.fp for s in self.steps),
                sum(s.tn for s in self.steps), sum(s.fn for s in self.steps))


def evaluate_policy(agent: DQNAgent, env: FirewallEnv, records: Sequence[FlowRecord]) -> EvalLog:
    """Greedy replay of one stream from an empty rule set."""
    log = EvalLog()
    state = env.reset(records)
    t = 0
    while not env.done:
        t += 1
        t0 = time.perf_counter_ns()
        action, _ = agent.act(state.vector, greedy=True)
        act_ns = time.perf_counter_ns() - t0
        state, out = env.step(action)
        log.steps.append(_log_entry(t, 0.0, None, out, act_ns + out.decision_latency_ns))
    return log
