"""Layers with explicit forward caches and backward passes (float64 numpy).

Every layer accepts a batch (leading axis ``N``) or a single sample; a
single sample is promoted to a batch of one and demoted on the way out.
``backward`` consumes the cache written by the most recent ``forward`` and
accumulates into ``Parameter.grad``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from ..errors import ShapeError, StateError


class Parameter:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


class Layer:
    def __init__(self):
        self._cache = None

    def params(self) -> dict[str, Parameter]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D sample or {ndim}-D batch, got shape {x.shape}")
    return x, False


class Dense(Layer):
    """``y = x W^T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.W = Parameter(uniform_init(rng, (n_out, n_in), n_in))
        self.b = Parameter(uniform_init(rng, (n_out,), n_in)) if bias else None

    def params(self):
        p = {"W": self.W}
        if self.b is not None:
            p["b"] = self.b
        return p

    def forward(self, x):
        x, single = _as_batch(x, 2)
        if x.shape[1] != self.n_in:
            raise ShapeError(f"Dense expects {self.n_in} inputs, got {x.shape[1]}")
        self._cache = x
        y = x @ self.W.value.T
        if self.b is not None:
            y = y + self.b.value
        return y[0] if single else y

    def backward(self, dy):
        x = self._pop_cache()
        dy, single = _as_batch(dy, 2)
        self.W.grad += dy.T @ x
        if self.b is not None:
            self.b.grad += dy.sum(axis=0)
        dx = dy @ self.W.value
        return dx[0] if single else dx


class ReLU(Layer):
    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, dy):
        mask = self._pop_cache()
        return np.where(mask, dy, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # two-branch form stays finite for large |z|
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


class Sigmoid(Layer):
    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, dy):
        y = self._pop_cache()
        return dy * y * (1.0 - y)


class Conv1D(Layer):
    """Valid 1-D convolution over time: ``(N, T, C_in) -> (N, T-K+1, C_out)``.

    ``kernel`` has shape ``(C_out, K, C_in)``; output step ``t`` sees input
    steps ``t .. t+K-1``.
    """

    def __init__(self, c_in: int, c_out: int, width: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.width = c_in, c_out, width
        fan_in = c_in * width
        self.kernel = Parameter(uniform_init(rng, (c_out, width, c_in), fan_in))
        self.b = Parameter(uniform_init(rng, (c_out,), fan_in))

    def params(self):
        return {"kernel": self.kernel, "b": self.b}

    def forward(self, x):
        x, single = _as_batch(x, 3)
        n, T, c = x.shape
        if c != self.c_in:
            raise ShapeError(f"Conv1D expects {self.c_in} channels, got {c}")
        if T < self.width:
            raise ShapeError(f"sequence length {T} shorter than kernel width {self.width}")
        t_out = T - self.width + 1
        cols = np.stack([x[:, k:k + t_out, :] for k in range(self.width)], axis=2)
        self._cache = (cols, T)
        y = np.einsum("ntki,oki->nto", cols, self.kernel.value) + self.b.value
        return y[0] if single else y

    def backward(self, dy):
        cols, T = self._pop_cache()
        dy, single = _as_batch(dy, 3)
        self.kernel.grad += np.einsum("nto,ntki->oki", dy, cols)
        self.b.grad += dy.sum(axis=(0, 1))
        dcols = np.einsum("nto,oki->ntki", dy, self.kernel.value)
        t_out = dy.shape[1]
        dx = np.zeros((dy.shape[0], T, self.c_in))
        for k in range(self.width):
            dx[:, k:k + t_out, :] += dcols[:, :, k, :]
        return dx[0] if single else dx


@dataclass
class LSTMState:
    hidden: np.ndarray
    cell: np.ndarray


class LSTM(Layer):
    """Single-layer LSTM returning the full hidden sequence ``(N, T, H)``.

    Gate blocks in ``W`` (input), ``U`` (recurrent) and ``b`` are ordered
    input, forget, candidate, output.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in, self.hidden = n_in, hidden
        self.W = Parameter(uniform_init(rng, (4 * hidden, n_in), hidden))
        self.U = Parameter(uniform_init(rng, (4 * hidden, hidden), hidden))
        self.b = Parameter(uniform_init(rng, (4 * hidden,), hidden))

    def params(self):
        return {"W": self.W, "U": self.U, "b": self.b}

    def _gates(self, x, h):
        H = self.hidden
        z = x @ self.W.value.T + h @ self.U.value.T + self.b.value
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        return i, f, g, o

    def step(self, state: LSTMState, x: np.ndarray) -> LSTMState:
        x, single = _as_batch(x, 2)
        if x.shape[1] != self.n_in:
            raise ShapeError(f"LSTM expects {self.n_in} inputs, got {x.shape[1]}")
        h = np.atleast_2d(state.hidden)
        c = np.atleast_2d(state.cell)
        if h.shape[1] != self.hidden or c.shape[1] != self.hidden:
            raise ShapeError(f"LSTM state must have {self.hidden} units")
        i, f, g, o = self._gates(x, h)
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        if single:
            return LSTMState(h_new[0], c_new[0])
        return LSTMState(h_new, c_new)

    def forward(self, x):
        x, single = _as_batch(x, 3)
        n, T, d = x.shape
        if d != self.n_in:
            raise ShapeError(f"LSTM expects {self.n_in} inputs, got {d}")
        H = self.hidden
        h = np.zeros((n, H))
        c = np.zeros((n, H))
        hs = np.empty((n, T, H))
        steps = []
        for t in range(T):
            i, f, g, o = self._gates(x[:, t], h)
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            steps.append((h_prev, c_prev, i, f, g, o, tc))
        self._cache = (x, steps)
        return hs[0] if single else hs

    def backward(self, dhs):
        x, steps = self._pop_cache()
        dhs, single = _as_batch(dhs, 3)
        n, T, _ = x.shape
        H = self.hidden
        dx = np.empty_like(x)
        dh_next = np.zeros((n, H))
        dc_next = np.zeros((n, H))
        W, U = self.W.value, self.U.value
        for t in reversed(range(T)):
            h_prev, c_prev, i, f, g, o, tc = steps[t]
            dh = dhs[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                                 dg * (1 - g * g), do * o * (1 - o)], axis=1)
            self.W.grad += dz.T @ x[:, t]
            self.U.grad += dz.T @ h_prev
            self.b.grad += dz.sum(axis=0)
            dx[:, t] = dz @ W
            dh_next = dz @ U
            dc_next = dc * f
        return dx[0] if single else dx


class MeanPool(Layer):
    """Average over the time axis: ``(N, T, C) -> (N, C)``."""

    def forward(self, x):
        x, single = _as_batch(x, 3)
        self._cache = x.shape
        y = x.mean(axis=1)
        return y[0] if single else y

    def backward(self, dy):
        shape = self._pop_cache()
        dy, single = _as_batch(dy, 2)
        dx = np.repeat(dy[:, None, :] / shape[1], shape[1], axis=1)
        return dx[0] if single else dx


class Sequential(Layer):
    """Named chain of layers. Parameter names are ``<layer>.<param>``."""

    def __init__(self, layers: Iterable[tuple[str, Layer]]):
        super().__init__()
        self.layers = list(layers)

    def params(self):
        out = {}
        for name, layer in self.layers:
            for pname, p in layer.params().items():
                out[f"{name}.{pname}"] = p
        return out

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for p in self.params().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(state) != set(params):
            raise ShapeError(f"state keys {sorted(state)} do not match {sorted(params)}")
        for k, p in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ShapeError(f"{k}: expected shape {p.shape}, got {v.shape}")
            p.value[...] = v


# Functional forms of the individual building blocks.

def dense_forward(layer: Dense, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)


def conv1d_relu_forward(conv: Conv1D, seq: np.ndarray) -> np.ndarray:
    return np.maximum(conv.forward(seq), 0.0)


def lstm_step(lstm: LSTM, state: LSTMState, x: np.ndarray) -> LSTMState:
    return lstm.step(state, x)
