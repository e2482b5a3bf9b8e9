"""End to end: train detector and agent, evaluate greedily, compare with a static rule set.

    python demos/03_adaptive_firewall.py [total_steps]
"""
# %%
import sys

import numpy as np

from dynfw.harness.config import config_from_dict
from dynfw.harness.experiment import compare_baseline, run_experiment
from dynfw.harness.metrics import moving_average

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
cfg = config_from_dict({"run": {"total_steps": steps, "seed": 0, "output_dir": "runs/demo"}})
result = run_experiment(cfg)

# %% learning curve, coarse
r = result.train_log.rewards()
ma = moving_average(r, 500)
for t in np.linspace(499, len(r) - 1, 6).astype(int):
    print(f"step {t + 1:>6}: 500-step mean reward {ma[t]:+.3f}")

# %% what the greedy policy does on the evaluation replay
m = result.eval_metrics
print(f"eval: blocks {m.detection_rate:.3f} of malicious flows, fpr {m.fpr:.4f}, "
      f"{m.rule_updates} rule updates ({m.redundant_updates} redundant)")
print("rules at end of eval:", result.eval_log.steps[-1].rule_count)

# %% static threshold rules vs the learned policy on the attacker-switching replay
for system, mm in compare_baseline(cfg).items():
    print(f"{system:>16}: accuracy {mm.accuracy:.4f} fpr {mm.fpr:.4f} detection {mm.detection_rate:.4f}")
