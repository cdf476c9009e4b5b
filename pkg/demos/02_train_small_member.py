# Train one reduced member on synthetic fundus-like images and read the
# validation report.  Full-size runs use the same code path at 224 px.

import time

import numpy as np

from manymobilenet.augment import gen_synthetic
from manymobilenet.metrics import evaluate
from manymobilenet.train import TrainConfig, fit, predict_proba, resolve_profile

# label 0 = ungradable (blurred, glared or occluded), 1 = gradable
train = gen_synthetic(48, 205 / 434, seed=1, image_size=32)
val = gen_synthetic(24, 0.5, seed=2, image_size=32)
print("train classes", train.class_counts(), "val classes", val.class_counts())

# width 0.25, 32 px and 40 epochs are all off the full training grid
cfg = TrainConfig(batch_size=8, lr_max=3e-3, width=0.25, dropout=0.01, epochs=40,
                  metric="average", augment_profile="imagenet", seed=0)

t0 = time.perf_counter()
best, history = fit(cfg, train, val, allow_off_grid=True)
print(f"trained {cfg.epochs} epochs in {time.perf_counter() - t0:.1f}s")

for r in history.records[::8]:
    print(f"epoch {r.epoch:3d}  lr {r.lr:.2e}  loss {r.loss:.4f}  train acc {r.train_acc:.3f}  "
          f"val auroc {r.val.auroc:.3f}")

print("best epoch (by acc/auroc average):", history.best_epoch)

# score the held-out split with the selected snapshot
probs = predict_proba(best, val.images, resolve_profile("imagenet"))
report = evaluate(probs[:, 1], val.labels, metric="average")
print(report.to_text())
print("predicted gradable fraction", np.mean(probs[:, 1] >= 0.5))
