"""Label leakage from cut-layer gradients on an imbalanced binary task.

The guest (label owner) sends back d loss / d embedding for every sample.
With 5% positives, positive samples get much larger gradients than
negatives, and they point the other way. A passive host can read labels off
either property.
"""

import numpy as np

from splitlab.attacks import direction_attack, norm_attack, spectral_attack
from splitlab.data import imbalanced_binary, train_test_split
from splitlab.numerics import RngStream
from splitlab.secdt import Architecture, fit
from splitlab.splitproto import TrainConfig, evaluate

data = imbalanced_binary(n=10_000, d=32, positive_rate=0.05, separation=6.0, seed=0)
train, test = train_test_split(data, 0.2, RngStream(0).child("split"))
print(f"train {len(train)} rows, {train.labels.mean():.3f} positive")

cfg = TrainConfig(epochs=20, batch_size=64, learning_rate=0.05, seed=0)
result, _ = fit(train, cfg, Architecture())
print("test utility:", evaluate(result.model, test).as_dict())

# the host only has the tap; labels are used for scoring afterwards
for attack in (norm_attack, direction_attack, spectral_attack):
    rep = attack(result.tap).score_against(train.ids, train.labels)
    print(f"{rep.attack:10s} leak AUC {rep.leak:.3f}")

ids, grads = result.tap.view("gradients", "last")
norms = np.linalg.norm(grads, axis=1)
pos = train.labels[np.searchsorted(train.ids, ids)] == 1
print(f"mean gradient norm: positives {norms[pos].mean():.2e}, negatives {norms[~pos].mean():.2e}")
