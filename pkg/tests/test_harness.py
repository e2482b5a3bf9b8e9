import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from dynfw.cli import main
from dynfw.errors import ConfigError, UsageError
from dynfw.harness.config import config_from_dict, load_config
from dynfw.harness.experiment import (baseline_ruleset, compare_baseline, gradcheck_suite,
                                      load_checkpoints, plan_traffic, replay_static, run_eval,
                                      run_experiment)
from dynfw.env import FirewallEnv, StepLog, TrainingLog
from dynfw.harness.metrics import (compute_metrics, confusion_metrics, moving_average, read_csv)

SCHEMA = json.loads((Path(__file__).parents[1] / "docs" / "csv_schema.json").read_text())

# a few-second version of the full pipeline
TINY = {
    "run": {"total_steps": 150, "seed": 3, "calibration_intervals": 20},
    "agent": {"hidden": [16], "batch_size": 16},
    "detector": {"hidden": 8, "channels": 4, "window": 6, "epochs": 1},
    "detector_traffic": {"duration": 80.0, "attack_start": 10.0},
    "episode_traffic": {"duration": 30.0, "attack_start": 5.0, "switch_every": 10.0},
    "eval_traffic": {"n_flows": 200, "attack_start": 5.0},
    "compare_traffic": {"duration": 60.0, "attack_start": 5.0, "switch_every": 15.0},
}


def tiny(**run):
    d = json.loads(json.dumps(TINY))
    d["run"].update(run)
    return config_from_dict(d)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """The tiny pipeline run twice into separate directories."""
    dirs = []
    for k in range(2):
        out = tmp_path_factory.mktemp(f"run{k}")
        cfg = tiny(eval_every=50)
        result = run_experiment(cfg, out)
        run_eval(cfg, out)
        compare_baseline(cfg, out)
        dirs.append((out, result))
    return dirs


# -- config -----------------------------------------------------------------------------

def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = load_config(p)
    assert (cfg.agent.gamma, cfg.agent.eta, cfg.agent.batch_size) == (0.99, 0.001, 64)
    assert cfg.agent.target_update_every == 2000 and cfg.rewards.bound == 10.0
    assert load_config(None).to_dict() == cfg.to_dict()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match=r"gamma.*\(0, 1\)"):
        config_from_dict({"gamma": 1.5})
    with pytest.raises(ConfigError, match="unknown key 'gamm'"):
        config_from_dict({"gamm": 0.9})
    with pytest.raises(ConfigError, match="agent.gamm"):
        config_from_dict({"agent": {"gamm": 0.9}})
    with pytest.raises(ConfigError, match="batch_size"):
        config_from_dict({"agent": {"batch_size": "big"}})
    with pytest.raises(ConfigError):
        config_from_dict({"agent": {"seed": 4}})  # the agent seed follows run.seed
    bad = tmp_path / "bad.yaml"
    bad.write_text("agent: [unclosed\n")
    with pytest.raises(ConfigError, match="parse failure"):
        load_config(bad)


def test_flat_keys_and_schedules():
    cfg = config_from_dict({"gamma": 0.9, "total_steps": 1000, "seed": 5})
    assert cfg.agent.gamma == 0.9 and cfg.run.seed == 5
    a = cfg.agent_config()
    assert (a.epsilon_decay_steps, a.beta_anneal_steps, a.seed) == (350, 1000, 5)
    a = config_from_dict({"agent": {"epsilon_decay_steps": 10}, "total_steps": 1000}).agent_config()
    assert a.epsilon_decay_steps == 10


def test_dump_round_trip():
    cfg = tiny()
    again = config_from_dict(yaml.safe_load(cfg.dump()))
    assert again.to_dict() == cfg.to_dict()
    assert again.agent_config() == cfg.agent_config()


# -- metrics ----------------------------------------------------------------------------

def fake_log(rows):
    return TrainingLog([StepLog(i + 1, 0.0, r, None, tp, fp, tn, fn, 0, False, 100 + i)
                        for i, (r, tp, fp, tn, fn) in enumerate(rows)])


def test_metrics_examples():
    acc, fpr, det = confusion_metrics(8, 1, 90, 1)
    assert acc == pytest.approx(0.98) and fpr == pytest.approx(1 / 91) and det == pytest.approx(8 / 9)
    assert confusion_metrics(3, 0, 0, 2)[1] == 0.0
    m = compute_metrics(fake_log([(1.0, 0, 0, 1, 0)] * 100))
    assert m.cumulative_reward == 100.0 and m.flows == 100
    with pytest.raises(UsageError):
        compute_metrics(TrainingLog())


def test_moving_average_oracle():
    x = np.random.default_rng(0).normal(size=50)
    ma = moving_average(x, 7)
    assert np.allclose(ma, [x[max(0, i - 6):i + 1].mean() for i in range(50)], atol=1e-12)


def test_metrics_recomputed_from_raw_log(runs):
    out, _ = runs[0]
    rows = read_csv(out / "train_log.csv")
    head, body = rows[0], rows[1:]
    col = {c: i for i, c in enumerate(head)}
    tot = {k: sum(int(r[col[k]]) for r in body) for k in ("tp", "fp", "tn", "fn")}
    rewards = sum(float(r[col["reward"]]) for r in body)
    lat = np.array([float(r[col["latency_ns"]]) for r in body])
    m = dict(zip(read_csv(out / "metrics.csv")[0], read_csv(out / "metrics.csv")[1]))
    assert m["phase"] == "train"
    flows = sum(tot.values())
    assert float(m["accuracy"]) == pytest.approx((tot["tp"] + tot["tn"]) / flows, abs=1e-12)
    assert float(m["fpr"]) == pytest.approx(tot["fp"] / (tot["fp"] + tot["tn"]), abs=1e-12)
    assert float(m["cumulative_reward"]) == pytest.approx(rewards, abs=1e-9)
    assert float(m["latency_median_ns"]) == np.median(lat)


# -- experiment -------------------------------------------------------------------------

def test_outputs_match_schema(runs):
    out, _ = runs[0]
    for name, columns in SCHEMA.items():
        if name == "gradcheck.csv":
            continue
        assert read_csv(out / name)[0] == columns, name
    assert (out / "eval_final_rules.txt").exists()
    for f in ("detector.params", "normalizer.params", "qnet.params", "qnet_target.params",
              "qnet_meta.json", "detector_meta.json", "config.yaml"):
        assert (out / "checkpoints" / f).exists()


def test_reruns_identical_except_latency(runs):
    (a, _), (b, _) = runs
    for name in SCHEMA:
        if (a / name).exists():
            assert read_csv(a / name, drop_latency=True) == read_csv(b / name, drop_latency=True), name
    for f in ("detector.params", "qnet.params", "qnet_target.params"):
        assert (a / "checkpoints" / f).read_bytes() == (b / "checkpoints" / f).read_bytes()


def test_run_properties(runs):
    _, res = runs[0]
    assert len(res.train_log) == 150
    assert all(-10 <= s.reward <= 10 for s in res.train_log.steps)
    assert len(res.train_log.snapshots) == 3


def test_comparison_arms_share_traffic(runs):
    out, _ = runs[0]
    rows = read_csv(out / "comparison.csv")
    assert [r[0] for r in rows[1:]] == ["adaptive", "static_threshold"]
    assert rows[1][1] == rows[2][1]


def test_empty_calibration_blocks_nothing(runs):
    out, _ = runs[0]
    cfg = tiny()
    det, norm, _ = load_checkpoints(out / "checkpoints")
    records = plan_traffic(cfg).comparison
    static = baseline_ruleset(records, np.ones(len(records)), 0, 1.0, 0.7)
    assert len(static) == 0
    env = FirewallEnv(det, norm, cfg.env_config())
    counted = [r for chunk in env.split_intervals(records)[1:] for r in chunk]
    m = compute_metrics(replay_static(static, env, records))
    assert m.fn == sum(r.is_malicious for r in counted) and m.tp == m.fp == 0


def test_baseline_uses_only_prefix():
    from dynfw.traffic import FlowRecord, Protocol
    recs = [FlowRecord(float(t), 100 + t, 1, 1, 1, Protocol.TCP, 1, 1, 0.0) for t in range(6)]
    rs = baseline_ruleset(recs, np.array([0.9, 0.1, 0.9, 0.9, 0.9, 0.9]), 3, 1.0, 0.7)
    assert [r.match.src.network for r in rs.rules] == [100, 102]


def test_missing_checkpoint(tmp_path):
    with pytest.raises(UsageError):
        compare_baseline(tiny(), tmp_path)


def test_gradcheck_suite_passes():
    reports = gradcheck_suite()
    assert {n for n, _ in reports} == {"dense", "conv1d", "lstm", "detector", "qnetwork"}
    assert all(r.passed and r.max_rel_error < 1e-4 for _, r in reports)


# -- command line -----------------------------------------------------------------------

def test_cli_dry_run(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("run:\n  total_steps: 1000\n")
    assert main(["train", "--config", str(p), "--seed", "4", "--dry-run"]) == 0
    text = capsys.readouterr().out
    dumped = yaml.safe_load(text)
    assert dumped["run"]["seed"] == 4 and dumped["run"]["total_steps"] == 1000
    assert "epsilon_decay_steps=350" in text


def test_cli_errors_are_tagged(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("gamm: 0.9\n")
    assert main(["train", "--config", str(p)]) == 2
    assert "dynfw: error [harness.config]: unknown key 'gamm'" in capsys.readouterr().err
    assert main(["compare", "--out", str(tmp_path / "none")]) == 2
    assert "no detector checkpoint" in capsys.readouterr().err
    assert main(["quickstart", "--config", str(p)]) == 2


def test_cli_gradcheck_writes_csv(tmp_path):
    out = subprocess.run([sys.executable, "-m", "dynfw.cli", "gradcheck", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert read_csv(tmp_path / "gradcheck.csv")[0] == SCHEMA["gradcheck.csv"]
