"""Aggregate metrics and CSV writers for run outputs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import UsageError

METRICS_COLUMNS = ("phase", "flows", "tp", "fp", "tn", "fn", "accuracy", "fpr",
                   "detection_rate", "cumulative_reward", "rule_updates", "redundant_updates",
                   "latency_median_ns", "latency_p95_ns", "latency_mean_ns")
COMPARISON_COLUMNS = ("system", "flows", "tp", "fp", "tn", "fn", "accuracy", "fpr",
                      "detection_rate", "latency_median_ns", "latency_p95_ns", "latency_mean_ns")
REWARD_CURVE_COLUMNS = ("step", "reward", "cumulative_reward", "moving_avg")
SNAPSHOT_COLUMNS = ("step", "flows", "accuracy", "fpr", "detection_rate", "rule_count")
GRADCHECK_COLUMNS = ("check", "param", "size", "max_rel_error", "flagged")
LATENCY_COLUMNS = frozenset({"latency_ns", "latency_median_ns", "latency_p95_ns", "latency_mean_ns"})


def safe_ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsRecord:
    flows: int
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    fpr: float
    detection_rate: float
    cumulative_reward: float
    rule_updates: int
    redundant_updates: int
    latency_median_ns: float
    latency_p95_ns: float
    latency_mean_ns: float

    def row(self) -> list:
        return [self.flows, self.tp, self.fp, self.tn, self.fn, repr(self.accuracy),
                repr(self.fpr), repr(self.detection_rate), repr(self.cumulative_reward),
                self.rule_updates, self.redundant_updates, repr(self.latency_median_ns),
                repr(self.latency_p95_ns), repr(self.latency_mean_ns)]


def confusion_metrics(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float, float]:
    """(accuracy, false positive rate, detection rate); empty denominators give 0."""
    return (safe_ratio(tp + tn, tp + tn + fp + fn), safe_ratio(fp, fp + tn),
            safe_ratio(tp, tp + fn))


def compute_metrics(log) -> MetricsRecord:
    """Summarize a TrainingLog or EvalLog (anything with ``.steps`` of StepLog)."""
    steps = log.steps
    if not steps:
        raise UsageError("cannot compute metrics of an empty log")
    tp = sum(s.tp for s in steps)
    fp = sum(s.fp for s in steps)
    tn = sum(s.tn for s in steps)
    fn = sum(s.fn for s in steps)
    acc, fpr, det = confusion_metrics(tp, fp, tn, fn)
    lat = np.array([s.latency_ns for s in steps], dtype=np.float64)
    return MetricsRecord(
        flows=tp + fp + tn + fn, tp=tp, fp=fp, tn=tn, fn=fn, accuracy=acc, fpr=fpr,
        detection_rate=det, cumulative_reward=float(sum(s.reward for s in steps)),
        rule_updates=sum(s.rule_update for s in steps),
        redundant_updates=sum(bool(s.redundant_flag) for s in steps),
        latency_median_ns=float(np.median(lat)), latency_p95_ns=float(np.percentile(lat, 95)),
        latency_mean_ns=float(lat.mean()),
    )


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over up to ``window`` most recent entries."""
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _write(path: str | Path, header: Iterable[str], rows: Iterable[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_metrics_csv(path: str | Path, records: list[tuple[str, MetricsRecord]]) -> None:
    _write(path, METRICS_COLUMNS, ([phase] + m.row() for phase, m in records))


def write_comparison_csv(path: str | Path, records: list[tuple[str, MetricsRecord]]) -> None:
    def row(system, m):
        return [system, m.flows, m.tp, m.fp, m.tn, m.fn, repr(m.accuracy), repr(m.fpr),
                repr(m.detection_rate), repr(m.latency_median_ns), repr(m.latency_p95_ns),
                repr(m.latency_mean_ns)]
    _write(path, COMPARISON_COLUMNS, (row(s, m) for s, m in records))


def write_reward_curve(path: str | Path, rewards: np.ndarray, window: int = 500) -> None:
    rewards = np.asarray(rewards, dtype=np.float64)
    cum = np.cumsum(rewards)
    ma = moving_average(rewards, window)
    _write(path, REWARD_CURVE_COLUMNS,
           ([i + 1, repr(float(r)), repr(float(c)), repr(float(m))]
            for i, (r, c, m) in enumerate(zip(rewards, cum, ma))))


def write_snapshots(path: str | Path, snapshots: list[dict]) -> None:
    _write(path, SNAPSHOT_COLUMNS, ([s[c] if isinstance(s[c], int) else repr(s[c])
                                     for c in SNAPSHOT_COLUMNS] for s in snapshots))


def write_gradcheck(path: str | Path, reports: list[tuple[str, object]]) -> None:
    _write(path, GRADCHECK_COLUMNS,
           ([name, p, size, repr(err), flagged] for name, rep in reports
            for p, size, err, flagged in rep.rows()))


def read_csv(path: str | Path, drop_latency: bool = False) -> list[list[str]]:
    """CSV rows including the header, optionally without wall-clock latency columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not drop_latency or not rows:
        return rows
    keep = [i for i, c in enumerate(rows[0]) if c not in LATENCY_COLUMNS]
    return [[r[i] for i in keep] for r in rows]
