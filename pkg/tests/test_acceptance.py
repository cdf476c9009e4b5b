"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Every test records a one-line verdict (see ``conftest.py``), so a full
``pytest`` run ends with a pass/fail table.  Running this file directly
prints the same lines.
"""

import csv
import io
import time
from decimal import ROUND_DOWN, ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
import pytest

import fusion_props
import gradcheck
from acceptance_log import record
from helpers import conv_instance, naive_conv2d, pair_auroc, sweep_auprc
from manymobilenet.augment import gen_synthetic
from manymobilenet.cli import main
from manymobilenet.fusion import MANY_MOBILENET_PRESET
from manymobilenet.metrics import ConfusionCounts, MetricsReport, auprc, auroc, binary_rates
from manymobilenet.model import ModelSpec, build_model, param_stats
from manymobilenet.nn_blocks import LayerParams, conv2d
from manymobilenet.tensor_core import Rng
from manymobilenet.train import TrainConfig, cosine_lr, fit, predict_proba, resolve_profile
from optim_cases import projection_instance, quadratic_distance, run_plain_comparison

MB = 1e6


# -- 1: model size ----------------------------------------------------------


def test_criterion_01_model_size():
    t0 = time.perf_counter()
    small = param_stats(ModelSpec(width_multiplier=1.0)).bytes_f32 / MB
    large = param_stats(ModelSpec(width_multiplier=3.0)).bytes_f32 / MB
    ratio = large / small
    secs = time.perf_counter() - t0
    ok = 11 <= small <= 16 and 100 <= large <= 140 and 7 <= ratio <= 10 and secs < 5
    detail = f"width 1.0 = {small:.2f} MB, width 3.0 = {large:.2f} MB, ratio {ratio:.2f}"
    assert record(1, "model-size arithmetic", ok, detail, secs), detail


# -- 2: gradients -----------------------------------------------------------


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    gradcheck.KINK_COORDS["count"] = 0
    worst = gradcheck.run_all(range(20))
    secs = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= 1e-3 and secs < 60
    detail = (
        f"{len(worst)} ops x 20 seeds, worst rel err {err:.1e} ({name}); "
        f"{gradcheck.KINK_COORDS['count']} kink-crossing coords re-differenced"
    )
    assert record(2, "gradient integrity", ok, detail, secs), worst


# -- 3: convolution oracle -------------------------------------------------


def test_criterion_03_conv_oracle():
    t0 = time.perf_counter()
    worst, kinds = 0.0, set()
    for seed in range(50):
        x, w, b, stride, pad, groups = conv_instance(1000 + seed)
        got, _ = conv2d(x, LayerParams(weight=w, bias=b), stride, pad, groups)
        worst = max(worst, float(np.abs(got - naive_conv2d(x, w, b, stride, pad, groups)).max()))
        kinds.add("groups=1" if groups == 1 else "groups=C")
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and kinds == {"groups=1", "groups=C"} and secs < 30
    assert record(3, "convolution oracle", ok, f"50 instances ({', '.join(sorted(kinds))}), max abs diff {worst:.1e}", secs)


# -- 4: metric oracles ------------------------------------------------------


def metric_instances(n_total=200, seed=0):
    rng = np.random.default_rng(seed)
    out = [
        (np.full(10, 0.5), np.array([0, 1] * 5)),  # all tied
        (np.linspace(0, 1, 20), np.array([0] * 10 + [1] * 10)),  # perfectly separated
        (np.linspace(0, 1, 20), np.array([1] * 10 + [0] * 10)),  # perfectly reversed
        (np.array([0.3, 0.7]), np.array([0, 1])),
    ]
    while len(out) < n_total:
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = [0, 1]
        levels = int(rng.integers(1, 15))
        s = rng.integers(0, levels + 1, n) / max(levels, 1) if rng.random() < 0.5 else rng.random(n)
        out.append((s, y))
    return out


def test_criterion_04_metric_oracles():
    t0 = time.perf_counter()
    worst = 0.0
    for s, y in metric_instances():
        worst = max(worst, abs(auroc(s, y) - pair_auroc(s, y)), abs(auprc(s, y) - sweep_auprc(s, y)))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and secs < 10
    assert record(4, "metric oracles", ok, f"200 instances incl. tied/separated, max diff {worst:.1e}", secs)


# -- 5: rate reproduction ---------------------------------------------------

# validation-set rows of the best-weights table: (sensitivity, specificity) as printed
PRINTED_RATES = [("0.9729", "0.7083"), ("0.7567", "0.8333"), ("0.7568", "0.875")]
# the two ensemble rows come from the same validation set
PRINTED_ENSEMBLE = [("0.8648", "0.75"), ("1.0", "0.625")]


def printed_match(value, printed):
    """True if ``value`` rounds (half-up) or truncates to the printed digits."""
    places = Decimal(printed)
    q = Decimal(1).scaleb(places.as_tuple().exponent)
    v = Decimal(repr(value))
    return v.quantize(q, ROUND_HALF_UP) == places or v.quantize(q, ROUND_DOWN) == places


def fit_denominator(printed_values, limit=100):
    """Smallest n with every printed value equal to some k/n; returns (n, [k...])."""
    for n in range(1, limit + 1):
        ks = []
        for p in printed_values:
            hits = [k for k in range(n + 1) if printed_match(k / n, p)]
            if not hits:
                break
            ks.append(hits[0])
        else:
            return n, ks
    return None, None


def test_criterion_05_rate_reproduction():
    t0 = time.perf_counter()
    sens = [s for s, _ in PRINTED_RATES + PRINTED_ENSEMBLE]
    spec = [p for _, p in PRINTED_RATES + PRINTED_ENSEMBLE]
    P, tps = fit_denominator(sens)
    N, tns = fit_denominator(spec)
    matched = 0
    for (ps, pp), tp, tn in zip(PRINTED_RATES, tps, tns):
        r = binary_rates(ConfusionCounts(tp=tp, fp=N - tn, tn=tn, fn=P - tp))
        matched += printed_match(r["sensitivity"], ps) + printed_match(r["specificity"], pp)
    secs = time.perf_counter() - t0
    ok = (P, N) == (37, 24) and matched == 6 and secs < 1
    detail = f"fitted P={P}, N={N}; TP={tps[:3]}, TN={tns[:3]}; {matched}/6 printed rates reproduced"
    assert record(5, "table rate reproduction", ok, detail, secs), detail


# -- 6: training sanity -----------------------------------------------------

SANITY_CONFIG = TrainConfig(
    batch_size=8, lr_max=3e-3, width=0.25, dropout=0.01, epochs=200, metric="acc",
    augment_profile="imagenet_noaug", seed=0,
)


def test_criterion_06_training_sanity():
    t0 = time.perf_counter()
    train_set = gen_synthetic(32, 0.5, seed=1, image_size=32)
    val_set = gen_synthetic(16, 0.5, seed=2, image_size=32)
    model = build_model(ModelSpec(width_multiplier=0.25, dropout=0.01, input_size=32), Rng(0))
    _, history = fit(SANITY_CONFIG, train_set, val_set, model=model, allow_off_grid=True)
    losses = np.array(history.losses)
    windows = [float(losses[i : i + 50].mean()) for i in range(0, 200, 50)]
    falling = all(b < a for a, b in zip(windows, windows[1:]))
    first_perfect = next((r.epoch for r in history.records if r.train_acc == 1.0), None)
    probs = predict_proba(model, train_set.images, resolve_profile("imagenet", train_set.images))
    final_acc = float(np.mean(probs.argmax(axis=1) == train_set.labels))
    secs = time.perf_counter() - t0
    ok = first_perfect is not None and final_acc == 1.0 and falling and secs < 300
    detail = (
        f"100% train acc first at epoch {first_perfect}, final inference acc {final_acc:.3f}; "
        f"50-epoch loss means {', '.join(f'{w:.3f}' for w in windows)}"
    )
    assert record(6, "training sanity", ok, detail, secs), detail


# -- 7: fusion properties and the 3-member preset ---------------------------


def read_rows(path):
    return list(csv.reader(io.StringIO(Path(path).read_text())))


def well_formed_predictions(path, n_rows, n_members):
    rows = read_rows(path)
    header = ["id", "score", "pred"] + [f"member_{j}" for j in range(n_members)]
    if rows[0] != header or len(rows) != n_rows + 1:
        return False
    for r in rows[1:]:
        scores = r[1:2] + r[3:]
        if any(len(s.split(".")[1]) != 6 or not 0.0 <= float(s) <= 1.0 for s in scores):
            return False
        if r[2] not in ("0", "1"):
            return False
    return True


def test_criterion_07_fusion(tmp_path):
    t0 = time.perf_counter()
    failures = fusion_props.run_properties(n_sets=500, seed=7)
    assert main(["gensynth", "--n", "16", "--balance", "0.5", "--seed", "11", "--image-size", "32", "--out", str(tmp_path / "tr")]) == 0
    assert main(["gensynth", "--n", "8", "--balance", "0.5", "--seed", "12", "--image-size", "32", "--out", str(tmp_path / "va")]) == 0
    lines = []
    for i, (width, profile) in enumerate(MANY_MOBILENET_PRESET):
        cfg = tmp_path / f"m{i}.txt"
        cfg.write_text(TrainConfig(batch_size=8, lr_max=1e-3, width=width, epochs=1, augment_profile=profile, seed=i).to_text())
        code = main(["train", "--config", str(cfg), "--data", str(tmp_path / "tr"), "--val", str(tmp_path / "va"),
                     "--image-size", "32", "--allow-off-grid", "--out", str(tmp_path / f"m{i}")])
        assert code == 0
        lines.append(f"member=m{i}/checkpoint.mmn,{profile}")
    formed = []
    for mode in ("max", "average"):
        (tmp_path / f"ens_{mode}.txt").write_text("\n".join(lines + [f"mode={mode}"]) + "\n")
        out = tmp_path / f"fused_{mode}"
        assert main(["fuse", "--ensemble", str(tmp_path / f"ens_{mode}.txt"), "--data", str(tmp_path / "va"), "--out", str(out)]) == 0
        formed.append(well_formed_predictions(out / "fused_predictions.csv", 8, 3))
        formed.append(all(read_rows(out / f"member_{j}_predictions.csv")[0] == ["id", "score", "pred"] for j in range(3)))
        MetricsReport.from_text((out / "metrics.txt").read_text())
    secs = time.perf_counter() - t0
    ok = not failures and all(formed) and secs < 120
    detail = f"500 member sets, {len(failures)} property failures; preset 1.0/1.0/3.0 fused (max, average), outputs well-formed={all(formed)}"
    assert record(7, "fusion properties + preset", ok, detail, secs), failures[:5]


# -- 8: determinism ---------------------------------------------------------


def test_criterion_08_determinism(tmp_path):
    t0 = time.perf_counter()
    assert main(["gensynth", "--n", "12", "--balance", "0.5", "--seed", "21", "--image-size", "32", "--out", str(tmp_path / "tr")]) == 0
    assert main(["gensynth", "--n", "8", "--balance", "0.5", "--seed", "22", "--image-size", "32", "--out", str(tmp_path / "va")]) == 0
    for i, profile in enumerate(("imagenet", "dataset")):
        # augmentation and dropout on, so every RNG stream is exercised
        cfg = TrainConfig(batch_size=8, lr_max=1e-3, width=0.25, dropout=0.05, epochs=6, augment_profile=profile, seed=5)
        (tmp_path / f"c{i}.txt").write_text(cfg.to_text())
    for rep in ("a", "b"):
        for i in range(2):
            code = main(["train", "--config", str(tmp_path / f"c{i}.txt"), "--data", str(tmp_path / "tr"),
                         "--val", str(tmp_path / "va"), "--image-size", "32", "--allow-off-grid",
                         "--out", str(tmp_path / f"{rep}{i}")])
            assert code == 0
        spec = tmp_path / f"ens_{rep}.txt"
        spec.write_text(f"member={rep}0/checkpoint.mmn,imagenet\nmember={rep}1/checkpoint.mmn,dataset\nmode=max\n")
        assert main(["fuse", "--ensemble", str(spec), "--data", str(tmp_path / "va"), "--workers", "2",
                     "--out", str(tmp_path / f"fuse_{rep}")]) == 0
    pairs = [(tmp_path / f"a{i}" / "history.csv", tmp_path / f"b{i}" / "history.csv") for i in range(2)]
    for name in ("fused_predictions.csv", "member_0_predictions.csv", "member_1_predictions.csv"):
        pairs.append((tmp_path / "fuse_a" / name, tmp_path / "fuse_b" / name))
    compared = [x.read_bytes() == y.read_bytes() for x, y in pairs]
    secs = time.perf_counter() - t0
    ok = all(compared) and secs < 300
    assert record(8, "determinism", ok, f"{sum(compared)}/{len(compared)} history/prediction files byte-identical across reruns", secs)


# -- 9: optimizer contracts -------------------------------------------------


def test_criterion_09_optimizer():
    from manymobilenet.train import AdamPState, adamp_step

    t0 = time.perf_counter()
    plain = all(run_plain_comparison(seed) for seed in range(5))
    worst_cos = 0.0
    for seed in range(10):
        w, g = projection_instance(seed)
        new = adamp_step(AdamPState(), {"conv.weight": w}, {"conv.weight": g}, 1e-2, 0.0)["conv.weight"]
        step = new - w
        worst_cos = max(worst_cos, abs(np.sum(step * w)) / (np.linalg.norm(step) * np.linalg.norm(w)))
    dist = max(quadratic_distance(seed) for seed in range(3))
    secs = time.perf_counter() - t0
    ok = plain and worst_cos <= 1e-6 and dist < 1e-2 and secs < 10
    detail = f"no-projection == Adam+decay bitwise: {plain}; max |cos(update, w)| {worst_cos:.1e}; quadratic |w-w*| {dist:.1e}"
    assert record(9, "optimizer contracts", ok, detail, secs), detail


# -- 10: cosine schedule ----------------------------------------------------


def test_criterion_10_cosine():
    t0 = time.perf_counter()
    errs, monotone = [], True
    for lr_max in (1.0, 1e-3, 1e-5):
        lr_min = lr_max * 0.01
        errs += [
            abs(cosine_lr(0, 500, lr_max, lr_min) - lr_max),
            abs(cosine_lr(250, 500, lr_max, lr_min) - (lr_max + lr_min) / 2),
            abs(cosine_lr(500, 500, lr_max, lr_min) - lr_min),
        ]
        lrs = [cosine_lr(t, 500, lr_max, lr_min) for t in range(501)]
        monotone &= all(b <= a for a, b in zip(lrs, lrs[1:]))
    secs = time.perf_counter() - t0
    ok = max(errs) <= 1e-12 and monotone and secs < 1
    assert record(10, "cosine schedule", ok, f"max endpoint/midpoint err {max(errs):.1e}, monotone={monotone}", secs)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
