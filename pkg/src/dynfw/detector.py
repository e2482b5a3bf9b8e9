"""Hybrid LSTM -> Conv1D+ReLU -> mean-pool -> sigmoid anomaly scorer.

The convolution runs along the time axis of the LSTM hidden-state
sequence, and mean pooling over the remaining ``W - K + 1`` steps feeds a
single-logit dense head.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, ShapeError
from .nn import (LSTM, Adam, Conv1D, Dense, MeanPool, ReLU, Sequential, bce_with_logits,
                 sigmoid)
from .traffic import Label, TrafficWindow


@dataclass
class DetectorHyper:
    input_dim: int = 16
    hidden: int = 16
    kernel_width: int = 3
    channels: int = 8
    window: int = 8
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    label_rule: str = "any"
    class_weighting: bool = True

    def validate(self):
        for name in ("input_dim", "hidden", "kernel_width", "channels", "window", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"detector.{name} must be >= 1")
        if self.window < self.kernel_width:
            raise ConfigError("detector.window must be >= detector.kernel_width")
        if self.epochs < 0:
            raise ConfigError("detector.epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("detector.learning_rate must be positive")
        if self.label_rule not in ("any", "majority"):
            raise ConfigError("detector.label_rule must be 'any' or 'majority'")


@dataclass(frozen=True)
class AnomalyScore:
    omega: float
    window_index: int = 0


class Flag(enum.Enum):
    FLAGGED = "FLAGGED"
    CLEAR = "CLEAR"


class DetectorModel:
    def __init__(self, hyper: DetectorHyper | None = None, seed: int = 0):
        self.hyper = hyper or DetectorHyper()
        self.hyper.validate()
        h = self.hyper
        rng = np.random.default_rng(seed)
        self.net = Sequential([
            ("lstm", LSTM(h.input_dim, h.hidden, rng)),
            ("conv", Conv1D(h.hidden, h.channels, h.kernel_width, rng)),
            ("relu", ReLU()),
            ("pool", MeanPool()),
            ("head", Dense(h.channels, 1, rng)),
        ])

    @property
    def head(self) -> Dense:
        return self.net.layers[-1][1]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        h = self.hyper
        if x.ndim != 3 or x.shape[2] != h.input_dim:
            raise ShapeError(f"expected windows of shape (N, W, {h.input_dim}), got {x.shape}")
        if x.shape[1] < h.kernel_width:
            raise ShapeError(f"window length {x.shape[1]} shorter than kernel width {h.kernel_width}")
        return x

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(self._check(x))[:, 0]

    def score_batch(self, x: np.ndarray) -> np.ndarray:
        """Anomaly likelihoods for an ``(N, W, D)`` stack of windows."""
        if len(x) == 0:
            return np.zeros(0)
        return sigmoid(self.logits(x))

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.net.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.net.load_state_dict(state)


def score(model: DetectorModel, window: TrafficWindow) -> AnomalyScore:
    omega = float(model.score_batch(window.matrix[None])[0])
    return AnomalyScore(omega, window.window_index)


def classify(score: AnomalyScore | float, threshold: float = 0.7) -> Flag:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    omega = score.omega if isinstance(score, AnomalyScore) else float(score)
    return Flag.FLAGGED if omega > threshold else Flag.CLEAR


def stack_windows(items: Sequence[TrafficWindow], rule: str = "any") -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([w.matrix for w in items])
    y = np.array([w.label(rule) is Label.MALICIOUS for w in items], dtype=np.float64)
    return x, y


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].train_acc if self.epochs else float("nan")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "train_acc", "val_acc"])
            for e in self.epochs:
                w.writerow([e.epoch, repr(e.loss), repr(e.train_acc), repr(e.val_acc)])


def _accuracy(model: DetectorModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean((model.score_batch(x) > 0.5) == (y > 0.5)))


def train(model: DetectorModel, x: np.ndarray, y: np.ndarray, seed: int = 0,
          validation: tuple[np.ndarray, np.ndarray] | None = None,
          epochs: int | None = None) -> TrainReport:
    """Minibatch Adam on class-weighted binary cross-entropy.

    ``x`` is ``(N, W, D)``; ``y`` holds 0/1 window labels.
    """
    h = model.hyper
    x = model._check(x)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0 or len(x) != len(y):
        raise ConfigError("training data must be non-empty with one label per window")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ConfigError("training data contains a single class")
    n_epochs = h.epochs if epochs is None else epochs
    report = TrainReport()
    if n_epochs == 0:
        return report

    if h.class_weighting:
        w_pos = len(y) / (2.0 * n_pos)
        w_neg = len(y) / (2.0 * (len(y) - n_pos))
        weights = np.where(y > 0.5, w_pos, w_neg)
    else:
        weights = np.ones_like(y)

    rng = np.random.default_rng(seed)
    opt = Adam(model.net.params(), lr=h.learning_rate)
    model.net.zero_grad()
    for epoch in range(n_epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), h.batch_size):
            idx = order[start:start + h.batch_size]
            logits = model.net.forward(x[idx])[:, 0]
            loss, dlogits = bce_with_logits(logits, y[idx], weights[idx])
            model.net.backward(dlogits[:, None])
            opt.step()
            total += loss * len(idx)
        val_acc = _accuracy(model, *validation) if validation is not None else float("nan")
        report.epochs.append(EpochStats(epoch, total / len(x), _accuracy(model, x, y), val_acc))
    return report
