"""Train the LSTM-conv anomaly detector on synthetic flows and look at its scores."""
# %%
import numpy as np

from dynfw.detector import DetectorHyper, DetectorModel, roc_auc, train
from dynfw.traffic import (SyntheticConfig, featurize, generate_synthetic, int_to_ip,
                           source_window_labels, source_windows)

W = 8
cfg = SyntheticConfig(duration=300.0, n_attackers=4, attack_start=30.0)
train_flows = generate_synthetic(cfg, seed=1)
test_flows = generate_synthetic(cfg, seed=2)
print(len(train_flows), "training flows,", sum(r.is_malicious for r in train_flows), "malicious")

# %% per-source windows: each flow sees its own source's last W flows
x, norm = featurize(train_flows)
xw, yw = source_windows(train_flows, x, W), source_window_labels(train_flows, W)
xt, _ = featurize(test_flows, norm)
xtw, ytw = source_windows(test_flows, xt, W), source_window_labels(test_flows, W)
print("window tensor", xw.shape, "positive fraction", yw.mean().round(3))

# %%
model = DetectorModel(DetectorHyper(input_dim=x.shape[1], window=W), seed=0)
report = train(model, xw, yw, seed=0, validation=(xtw, ytw))
for e in report.epochs:
    print(f"epoch {e.epoch}: loss {e.loss:.4f} train acc {e.train_acc:.3f} val acc {e.val_acc:.3f}")

scores = model.score_batch(xtw)
print("held-out ROC-AUC:", round(roc_auc(scores, ytw), 4))

# %% mean score per source, attackers first
by_src = {}
for r, s in zip(test_flows, scores):
    by_src.setdefault((r.is_malicious, r.src_addr), []).append(s)
top = sorted(by_src.items(), key=lambda kv: -np.mean(kv[1]))[:8]
for (bad, src), s in top:
    print(f"{int_to_ip(src):>15} {'attacker' if bad else 'benign':8} mean score {np.mean(s):.3f}")
