import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynfw.agent import (AgentConfig, DQNAgent, QNetwork, ReplayMemory, Transition, Which,
                         epsilon_at, q_values, replay_sample, select_action, sync_target, td_update)
from dynfw.errors import ConfigError, ShapeError, UsageError
from dynfw.nn import make_optimizer

from toymdp import greedy_policy, train_toy, value_iteration


def manual_forward(net, x):
    sd = net.online.state_dict()
    h = x
    i = 0
    while f"fc{i}.W" in sd:
        h = np.maximum(sd[f"fc{i}.W"] @ h + sd[f"fc{i}.b"], 0.0)
        i += 1
    return sd["out.W"] @ h + sd["out.b"]


def test_zero_network_outputs_zero():
    net = QNetwork(5, 3, (8,))
    for p in net.online.params().values():
        p.value[...] = 0.0
    assert np.array_equal(q_values(net, np.ones(5)), np.zeros(3))


def test_forward_matches_manual_chain():
    net = QNetwork(6, 4, (7, 5), seed=3)
    x = np.random.default_rng(0).normal(size=6)
    assert np.allclose(q_values(net, x), manual_forward(net, x), atol=1e-12, rtol=0)
    with pytest.raises(ShapeError):
        q_values(net, np.ones(5))


def test_target_copy_and_sync():
    x = np.random.default_rng(1).normal(size=(10, 4))
    net = QNetwork(4, 3, (8,), seed=0, independent_target=True)
    assert not np.allclose(q_values(net, x), q_values(net, x, Which.TARGET))
    sync_target(net)
    assert np.abs(q_values(net, x) - q_values(net, x, Which.TARGET)).max() == 0.0
    assert np.array_equal(QNetwork(4, 3, (8,)).online.forward(x), QNetwork(4, 3, (8,)).target.forward(x))


def test_epsilon_schedule():
    c = AgentConfig(epsilon_decay_steps=100)
    assert epsilon_at(0, c) == 1.0
    assert epsilon_at(100, c) == pytest.approx(0.05) and epsilon_at(10**6, c) == pytest.approx(0.05)
    eps = [epsilon_at(s, c) for s in range(0, 200, 3)]
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    assert all(0.05 - 1e-12 <= e <= 1.0 for e in eps)


def test_greedy_when_epsilon_zero():
    net = QNetwork(3, 3, ())
    net.online.layers[-1][1].W.value[...] = 0.0
    net.online.layers[-1][1].b.value[...] = [0.1, 0.9, 0.3]
    c = AgentConfig(epsilon_start=0.0, epsilon_end=0.0)
    rng = np.random.default_rng(0)
    assert all(select_action(net, np.zeros(3), s, c, rng) == (1, 0.0) for s in range(5))


def _one_transition_net(q_next_max):
    """Linear net with Q(s0, .) = 0 online and max_a Q_target(s0, a) = q_next_max."""
    net = QNetwork(2, 2, (), bias=False)
    net.online.layers[0][1].W.value[...] = 0.0
    net.target.layers[0][1].W.value[...] = [[q_next_max, 0.0], [0.0, 0.0]]
    s0 = np.array([1.0, 0.0])
    return net, s0


def test_td_target_examples():
    # gamma must lie in (0, 1), so the no-bootstrap case uses an all-zero target instead
    net, s0 = _one_transition_net(0.0)
    opt = make_optimizer("sgd", net.online.params(), 1.0)
    _, prio = td_update(net, [Transition(s0, 0, 1.0, s0)], AgentConfig(optimizer="sgd"), opt)
    assert prio[0] == pytest.approx(1.0 + 1e-3)  # |td error| before the step, plus the floor
    assert q_values(net, s0)[0] == pytest.approx(1.0)  # a unit step lands exactly on the target
    net, s0 = _one_transition_net(2.0)
    opt = make_optimizer("sgd", net.online.params(), 1.0)
    td_update(net, [Transition(s0, 0, 1.0, s0)], AgentConfig(gamma=0.99, optimizer="sgd"), opt)
    assert q_values(net, s0)[0] == pytest.approx(2.98, abs=1e-12)


def tabular_instance(rng):
    n_s, n_a = int(rng.integers(2, 8)), int(rng.integers(2, 6))
    gamma, eta = float(rng.uniform(0.01, 0.99)), float(rng.uniform(1e-3, 1.0))
    net = QNetwork(n_s, n_a, (), bias=False, independent_target=True, seed=int(rng.integers(1 << 30)))
    q = net.online.state_dict()["out.W"].T.copy()       # q[s, a]
    q_target = net.target.state_dict()["out.W"].T.copy()
    s, a, s2 = int(rng.integers(n_s)), int(rng.integers(n_a)), int(rng.integers(n_s))
    r = float(rng.uniform(-10, 10))
    return net, q, q_target, (s, a, r, s2), gamma, eta


def scalar_bellman(q, q_target, s, a, r, s2, gamma, eta):
    out = q.copy()
    out[s, a] = (1 - eta) * q[s, a] + eta * (r + gamma * q_target[s2].max())
    return out


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200)
def test_tabular_equivalence(seed):
    rng = np.random.default_rng(seed)
    net, q, qt, (s, a, r, s2), gamma, eta = tabular_instance(rng)
    eye = np.eye(net.state_dim)
    cfg = AgentConfig(gamma=gamma, eta=eta, optimizer="sgd")
    td_update(net, [Transition(eye[s], a, r, eye[s2])], cfg, make_optimizer("sgd", net.online.params(), eta))
    new_q = net.online.state_dict()["out.W"].T
    assert np.abs(new_q - scalar_bellman(q, qt, s, a, r, s2, gamma, eta)).max() < 1e-10


def test_done_drops_bootstrap():
    net = QNetwork(2, 2, (), bias=False)
    net.online.layers[0][1].W.value[...] = 0.0
    net.target.layers[0][1].W.value[...] = 5.0
    t = Transition(np.array([1.0, 0.0]), 1, 2.0, np.array([0.0, 1.0]), done=True)
    td_update(net, [t], AgentConfig(optimizer="sgd"), make_optimizer("sgd", net.online.params(), 1.0))
    assert q_values(net, t.state)[1] == pytest.approx(2.0)
    with pytest.raises(UsageError):
        td_update(net, [], AgentConfig(), make_optimizer("sgd", net.online.params(), 1.0))


def _filled(priorities, alpha):
    m = ReplayMemory(len(priorities), 1, priority_exponent=alpha)
    for p in priorities:
        m.push(Transition(np.zeros(1), 0, 0.0, np.zeros(1)), priority=p)
    return m


def _frequencies(memory, draws, rng, k=1000):
    counts = np.zeros(len(memory))
    for _ in range(draws // k):
        idx, _, _ = replay_sample(memory, k, rng)
        counts += np.bincount(idx, minlength=len(memory))
    return counts / counts.sum()


def test_priority_sampling_ratio():
    rng = np.random.default_rng(0)
    f = _frequencies(_filled([1.0, 3.0], 1.0), 100_000, rng)
    assert f[1] / f[0] == pytest.approx(3.0, rel=0.05)
    f = _frequencies(_filled([1.0, 3.0], 0.0), 100_000, rng)
    assert f[1] / f[0] == pytest.approx(1.0, rel=0.05)
    f = _frequencies(_filled([2.0] * 5, 0.6), 100_000, rng)
    assert np.all(np.abs(f - 0.2) <= 0.05 * 0.2)


def test_importance_weights():
    m = _filled([1.0, 3.0], 1.0)
    m.is_weight_exponent = 1.0
    idx, _, w = m.sample(200, np.random.default_rng(0))
    # w_i proportional to 1 / P(i), normalised by the largest weight
    expected = np.where(idx == 0, 1.0, 1.0 / 3.0)
    assert np.allclose(w, expected)


def test_replay_fifo_and_bounds():
    m = ReplayMemory(3, 1)
    for i in range(5):
        m.push(Transition(np.full(1, i), 0, float(i), np.zeros(1)))
        assert len(m) <= 3
    assert sorted(m.insertion_ids.tolist()) == [2, 3, 4]
    assert sorted(m.rewards.tolist()) == [2.0, 3.0, 4.0]
    assert ReplayMemory(3, 1).sample(4, np.random.default_rng(0)) is None
    with pytest.raises(ValueError):
        m.push(Transition(np.zeros(1), 0, 10.5, np.zeros(1)))


def test_sync_schedule_and_staleness():
    c = AgentConfig(batch_size=4, target_update_every=7, hidden=(4,), epsilon_decay_steps=10)
    agent = DQNAgent(3, 2, c)
    rng = np.random.default_rng(0)
    prev_target = agent.net.target.state_dict()
    for step in range(1, 30):
        s = rng.normal(size=3)
        agent.observe(Transition(s, int(rng.integers(2)), float(rng.normal()), rng.normal(size=3)))
        tgt = agent.net.target.state_dict()
        changed = any(not np.array_equal(tgt[k], prev_target[k]) for k in tgt)
        assert changed == (step % 7 == 0)
        prev_target = tgt
    assert agent.sync_steps == [7, 14, 21, 28]


def test_config_validation():
    for bad in (dict(gamma=1.5), dict(gamma=0.0), dict(eta=0.0), dict(batch_size=0),
                dict(epsilon_start=0.1, epsilon_end=0.2), dict(optimizer="rmsprop")):
        with pytest.raises(ConfigError):
            AgentConfig(**bad).validate()


def test_checkpoint_round_trip(tmp_path):
    agent = DQNAgent(4, 3, AgentConfig(batch_size=2, hidden=(5,), seed=9))
    rng = np.random.default_rng(0)
    for _ in range(6):
        agent.observe(Transition(rng.normal(size=4), 1, 0.5, rng.normal(size=4)))
    agent.save(tmp_path)
    again = DQNAgent.load(tmp_path)
    x = rng.normal(size=(3, 4))
    assert np.array_equal(q_values(agent.net, x), q_values(again.net, x))
    assert np.array_equal(q_values(agent.net, x, Which.TARGET), q_values(again.net, x, Which.TARGET))
    assert again.steps == 6 and again.config == agent.config
    with pytest.raises(UsageError):
        DQNAgent.load(tmp_path / "missing")


def test_toy_mdp_value_iteration():
    q = value_iteration()
    assert np.allclose(q, [[17.2, 18.0], [16.2, 20.0]])


def test_toy_mdp_greedy_policy_optimal():
    optimal = value_iteration().argmax(axis=1).tolist()
    agent = train_toy(seed=0)
    assert greedy_policy(agent) == optimal
