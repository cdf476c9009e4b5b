# Three members in the shape of the preset (two narrow, one wider; two
# normalization profiles), trained small and then fused.  Max fusion trusts
# whichever member is most confident per class; average fusion smooths them.

import numpy as np

from manymobilenet.augment import gen_synthetic
from manymobilenet.fusion import Ensemble, Member, fuse, member_profile
from manymobilenet.metrics import evaluate
from manymobilenet.train import TrainConfig, fit

train = gen_synthetic(40, 0.5, seed=3, image_size=32)
val = gen_synthetic(16, 0.5, seed=5, image_size=32)
test = gen_synthetic(32, 0.5, seed=4, image_size=32)

# widths scaled down from the full-size 1.0 / 1.0 / 3.0 preset
layout = [(0.25, "imagenet"), (0.25, "dataset"), (0.75, "imagenet")]
members = []
for i, (width, profile) in enumerate(layout):
    cfg = TrainConfig(batch_size=8, lr_max=3e-3, width=width, epochs=40, metric="auc",
                      augment_profile=f"{profile}_noaug", seed=i)
    model, _ = fit(cfg, train, val, allow_off_grid=True)
    # the dataset profile's statistics travel with the model
    members.append(Member(model, member_profile(model, profile), f"w{width}-{profile}"))

for mode in ("max", "average"):
    preds = Ensemble(members, mode).predict(test.images)
    scores = np.array([p.score for p in preds])
    rep = evaluate(scores, test.labels)
    print(f"{mode:>7}: acc {rep.accuracy:.3f}  auroc {rep.auroc:.3f}  sens {rep.sensitivity:.3f}  spec {rep.specificity:.3f}")

for j, m in enumerate(members):
    solo = Ensemble([m]).predict(test.images)
    rep = evaluate([p.score for p in solo], test.labels)
    print(f"member {j} ({m.name}): acc {rep.accuracy:.3f}  auroc {rep.auroc:.3f}")

# the fusion rules on a single sample, by hand
p = np.array([[0.9, 0.1], [0.4, 0.6], [0.3, 0.7]])
print("average", fuse(p, "average"), "max", fuse(p, "max"))
