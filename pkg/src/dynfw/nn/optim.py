"""Losses and first-order optimizers."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .layers import Layer, Parameter


def bce_with_logits(logits, targets, weights=None) -> tuple[float, np.ndarray]:
    """Weighted mean binary cross-entropy of ``sigmoid(logits)``; returns (loss, dL/dlogits)."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} vs targets {y.shape}")
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    # log(1 + e^z) - y z, written to avoid overflow
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = len(z)
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    grad = w * (p - y) / n
    return float(np.sum(w * per) / n), grad.reshape(np.shape(logits))


def weighted_half_mse(pred, target, weights=None) -> tuple[float, np.ndarray]:
    """``mean(w * 0.5 * (pred - target)**2)`` and its gradient w.r.t. ``pred``.

    The one-half factor makes one SGD step on a one-hot linear model equal
    to the scalar Q-learning update with the same learning rate.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    w = np.ones_like(pred) if weights is None else np.asarray(weights, dtype=np.float64)
    diff = pred - target
    n = diff.size
    return float(np.sum(w * 0.5 * diff * diff) / n), w * diff / n


class Optimizer:
    def __init__(self, params: dict[str, Parameter], lr: float):
        self.params = dict(params)
        self.lr = lr

    def step(self) -> None:
        """Apply one update from accumulated grads, then zero them."""
        for name, p in self.params.items():
            self._update(name, p)
            p.zero_grad()

    def _update(self, name: str, p: Parameter) -> None:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


class SGD(Optimizer):
    def _update(self, name, p):
        p.value -= self.lr * p.grad


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        super().step()

    def _update(self, name, p):
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * p.grad
        v *= self.beta2
        v += (1 - self.beta2) * p.grad * p.grad
        m_hat = m / (1 - self.beta1 ** self.t)
        v_hat = v / (1 - self.beta2 ** self.t)
        p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k][...] = state[f"m.{k}"]
            self.v[k][...] = state[f"v.{k}"]


def make_optimizer(kind: str, params: dict[str, Parameter], lr: float) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def backward_and_step(model: Layer, dloss: np.ndarray, optimizer: Optimizer) -> None:
    """Backpropagate ``dloss`` through ``model`` and apply one optimizer step."""
    model.backward(dloss)
    optimizer.step()
