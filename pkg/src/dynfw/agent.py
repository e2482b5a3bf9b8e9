"""DQN learner: online/target Q-networks, epsilon-greedy, prioritized replay."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UsageError
from .nn import Dense, ReLU, Sequential, load_params, make_optimizer, save_params
from .nn.optim import Optimizer, weighted_half_mse

PRIORITY_FLOOR = 1e-3


@dataclass
class AgentConfig:
    gamma: float = 0.99
    eta: float = 1e-3
    batch_size: int = 64
    target_update_every: int = 2000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 35_000
    replay_capacity: int = 50_000
    hidden: tuple[int, ...] = (64, 64)
    optimizer: str = "adam"
    priority_alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    beta_anneal_steps: int = 100_000
    reward_bound: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        for name in ("batch_size", "target_update_every", "epsilon_decay_steps",
                     "replay_capacity", "beta_anneal_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        for name in ("epsilon_start", "epsilon_end", "beta_start", "beta_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.epsilon_end > self.epsilon_start:
            raise ConfigError("epsilon_end must not exceed epsilon_start")
        if self.priority_alpha < 0:
            raise ConfigError("priority_alpha must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if any(h < 1 for h in self.hidden):
            raise ConfigError("hidden layer sizes must be positive")
        if self.reward_bound <= 0:
            raise ConfigError("reward_bound must be positive")


class Which(enum.Enum):
    ONLINE = "ONLINE"
    TARGET = "TARGET"


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    priority: float = 1.0
    done: bool = False


def build_mlp(n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator,
              bias: bool = True) -> Sequential:
    layers = []
    width = n_in
    for i, h in enumerate(hidden):
        layers += [(f"fc{i}", Dense(width, h, rng, bias)), (f"relu{i}", ReLU())]
        width = h
    layers.append(("out", Dense(width, n_out, rng, bias)))
    return Sequential(layers)


class QNetwork:
    """Online network and a same-shaped target copy.

    The target starts as a copy of the online weights unless
    ``independent_target`` is set, in which case it gets its own init.
    """

    def __init__(self, state_dim: int, n_actions: int, hidden: Sequence[int] = (64, 64),
                 seed: int = 0, bias: bool = True, independent_target: bool = False):
        self.state_dim, self.n_actions = state_dim, n_actions
        self.online = build_mlp(state_dim, hidden, n_actions, np.random.default_rng([seed, 0]), bias)
        self.target = build_mlp(state_dim, hidden, n_actions, np.random.default_rng([seed, 1]), bias)
        if not independent_target:
            self.sync_target()

    def sync_target(self) -> None:
        self.target.load_state_dict(self.online.state_dict())

    def network(self, which: Which) -> Sequential:
        return self.online if which is Which.ONLINE else self.target


def q_values(net: QNetwork, state: np.ndarray, which: Which = Which.ONLINE) -> np.ndarray:
    state = np.asarray(state, dtype=np.float64)
    if state.shape[-1] != net.state_dim:
        raise ShapeError(f"state has {state.shape[-1]} entries, network expects {net.state_dim}")
    return net.network(which).forward(state)


def sync_target(net: QNetwork) -> None:
    net.sync_target()


def epsilon_at(step: int, config: AgentConfig) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_end``, then constant."""
    frac = min(max(step, 0) / config.epsilon_decay_steps, 1.0)
    return config.epsilon_start + frac * (config.epsilon_end - config.epsilon_start)


def select_action(net: QNetwork, state: np.ndarray, step: int, config: AgentConfig,
                  rng: np.random.Generator) -> tuple[int, float]:
    """Epsilon-greedy choice; argmax ties go to the lowest index."""
    eps = epsilon_at(step, config)
    # draw unconditionally so the RNG stream does not depend on epsilon
    explore = rng.random() < eps
    random_action = int(rng.integers(net.n_actions))
    if explore:
        return random_action, eps
    return int(np.argmax(q_values(net, state))), eps


class ReplayMemory:
    """Fixed-capacity FIFO ring with proportional prioritized sampling."""

    def __init__(self, capacity: int, state_dim: int, priority_exponent: float = 0.6,
                 is_weight_exponent: float = 0.4, reward_bound: float = 10.0):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self.state_dim = state_dim
        self.priority_exponent = priority_exponent
        self.is_weight_exponent = is_weight_exponent
        self.reward_bound = reward_bound
        self.states = np.zeros((capacity, state_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.priorities = np.zeros(capacity)
        self.insertion_ids = np.full(capacity, -1, dtype=np.int64)
        self.pushed = 0
        self.max_priority = 1.0

    def __len__(self):
        return min(self.pushed, self.capacity)

    def push(self, t: Transition, priority: float | None = None) -> None:
        if not -self.reward_bound <= t.reward <= self.reward_bound:
            raise ValueError(f"reward {t.reward} outside [-{self.reward_bound}, {self.reward_bound}]")
        i = self.pushed % self.capacity
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.priorities[i] = self.max_priority if priority is None else priority
        self.insertion_ids[i] = self.pushed
        self.pushed += 1

    def transition(self, i: int) -> Transition:
        return Transition(self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
                          self.next_states[i].copy(), float(self.priorities[i]), bool(self.dones[i]))

    def probabilities(self) -> np.ndarray:
        p = self.priorities[:len(self)] ** self.priority_exponent
        return p / p.sum()

    def sample(self, k: int, rng: np.random.Generator):
        """``(indices, transitions, weights)`` drawn with replacement; ``None`` when empty."""
        n = len(self)
        if n == 0 or k < 1:
            return None
        probs = self.probabilities()
        idx = rng.choice(n, size=k, p=probs)
        w = (n * probs[idx]) ** (-self.is_weight_exponent)
        w /= w.max()
        return idx, [self.transition(i) for i in idx], w

    def update_priorities(self, idx: np.ndarray, priorities: np.ndarray) -> None:
        self.priorities[idx] = priorities
        self.max_priority = max(self.max_priority, float(np.max(priorities)))


def replay_sample(memory: ReplayMemory, k: int, rng: np.random.Generator):
    return memory.sample(k, rng)


def td_update(net: QNetwork, batch: Sequence[Transition], config: AgentConfig,
              optimizer: Optimizer, weights: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """One gradient step on the importance-weighted TD loss.

    Targets are ``r + gamma * max_a' Q_target(s', a')``; returns the batch
    loss and refreshed priorities ``|td_error| + 1e-3`` (errors measured
    before the step).
    """
    if len(batch) == 0:
        raise UsageError("td_update needs a non-empty batch")
    states = np.stack([t.state for t in batch])
    next_states = np.stack([t.next_state for t in batch])
    actions = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    alive = np.array([not t.done for t in batch], dtype=np.float64)
    targets = rewards + config.gamma * alive * q_values(net, next_states, Which.TARGET).max(axis=1)
    q_all = net.online.forward(states)
    rows = np.arange(len(batch))
    q = q_all[rows, actions]
    td = q - targets
    w = np.ones(len(batch)) if weights is None else np.asarray(weights, dtype=np.float64)
    loss, dq = weighted_half_mse(q, targets, w)
    dout = np.zeros_like(q_all)
    dout[rows, actions] = dq
    net.online.backward(dout)
    optimizer.step()
    return loss, np.abs(td) + PRIORITY_FLOOR


class DQNAgent:
    """Bundles network, optimizer, replay, and counters for the training loop."""

    def __init__(self, state_dim: int, n_actions: int, config: AgentConfig | None = None):
        self.config = config or AgentConfig()
        self.config.validate()
        c = self.config
        self.net = QNetwork(state_dim, n_actions, c.hidden, c.seed)
        self.optimizer = make_optimizer(c.optimizer, self.net.online.params(), c.eta)
        self.memory = ReplayMemory(c.replay_capacity, state_dim, c.priority_alpha,
                                   c.beta_start, c.reward_bound)
        self.rng = np.random.default_rng([c.seed, 2])
        self.steps = 0
        self.updates = 0
        self.sync_steps: list[int] = []

    @property
    def epsilon(self) -> float:
        return epsilon_at(self.steps, self.config)

    def act(self, state: np.ndarray, greedy: bool = False) -> tuple[int, float]:
        if greedy:
            return int(np.argmax(q_values(self.net, state))), 0.0
        return select_action(self.net, state, self.steps, self.config, self.rng)

    def beta(self) -> float:
        c = self.config
        frac = min(self.steps / c.beta_anneal_steps, 1.0)
        return c.beta_start + frac * (c.beta_end - c.beta_start)

    def observe(self, transition: Transition) -> float | None:
        """Store, learn from a minibatch if ready, sync on schedule; returns the loss."""
        self.memory.push(transition)
        self.steps += 1
        loss = None
        self.memory.is_weight_exponent = self.beta()
        drawn = None
        if len(self.memory) >= self.config.batch_size:
            drawn = self.memory.sample(self.config.batch_size, self.rng)
        if drawn is not None:
            idx, batch, w = drawn
            loss, prios = td_update(self.net, batch, self.config, self.optimizer, w)
            self.memory.update_priorities(idx, prios)
            self.updates += 1
        if self.steps % self.config.target_update_every == 0:
            self.net.sync_target()
            self.sync_steps.append(self.steps)
        return loss

    def save(self, directory: str | Path, prefix: str = "qnet") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_params(d / f"{prefix}.params", self.net.online.state_dict())
        save_params(d / f"{prefix}_target.params", self.net.target.state_dict())
        meta = {
            "format": "dynfw-agent-meta",
            "version": 1,
            "state_dim": self.net.state_dim,
            "n_actions": self.net.n_actions,
            "steps": self.steps,
            "updates": self.updates,
            "epsilon": self.epsilon,
            "sync_steps": self.sync_steps,
            "config": {k: list(v) if isinstance(v, tuple) else v
                       for k, v in asdict(self.config).items()},
        }
        (d / f"{prefix}_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, prefix: str = "qnet") -> "DQNAgent":
        d = Path(directory)
        meta_path = d / f"{prefix}_meta.json"
        if not meta_path.exists():
            raise UsageError(f"no agent checkpoint at {meta_path}")
        meta = json.loads(meta_path.read_text())
        cfg = dict(meta["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        agent = cls(meta["state_dim"], meta["n_actions"], AgentConfig(**cfg))
        agent.net.online.load_state_dict(load_params(d / f"{prefix}.params"))
        agent.net.target.load_state_dict(load_params(d / f"{prefix}_target.params"))
        agent.steps = meta["steps"]
        agent.updates = meta["updates"]
        agent.sync_steps = list(meta["sync_steps"])
        return agent
