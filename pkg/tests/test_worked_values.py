"""Small hand-checkable cases for each module, pinned to independent oracles."""

import math

import numpy as np
import pytest

from helpers import naive_conv2d, naive_matmul
from manymobilenet.augment import gen_synthetic, read_labels
from manymobilenet.cli import main
from manymobilenet.fusion import fuse_average, fuse_max
from manymobilenet.metrics import MetricsReport, ConfusionCounts, binary_rates, ranking_score
from manymobilenet.model import ModelSpec, block_configs, build_model, param_count, param_stats, round_to_multiple, save_checkpoint
from manymobilenet.nn_blocks import (
    BlockParams,
    LayerParams,
    batchnorm,
    conv2d,
    dropout,
    fully_connected,
    global_avg_pool,
    se_block,
)
from manymobilenet.tensor_core import Rng, im2col, matmul
from manymobilenet.train import TrainConfig


def test_matmul_hand_case():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[5.0], [6.0]]))
    np.testing.assert_array_equal(out, [[17.0], [39.0]])


def test_matmul_random_7x5_by_5x3():
    rng = np.random.default_rng(7)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6)


def test_im2col_center_column_is_whole_image():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    cols = im2col(x, 3, 3, stride=1, pad=1)
    np.testing.assert_array_equal(cols[:, 4], np.arange(1.0, 10.0))


def test_conv_2x3x8x8_matches_loop_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    out, _ = conv2d(x, LayerParams(weight=w), pad=1)
    np.testing.assert_allclose(out, naive_conv2d(x, w, pad=1), atol=1e-4)


def test_depthwise_all_ones_patch_sums():
    x = np.ones((1, 1, 3, 3))
    out, _ = conv2d(x, LayerParams(weight=np.ones((1, 1, 3, 3))), pad=1, groups=1)
    expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float)
    np.testing.assert_array_equal(out[0, 0], expected)


def test_conv_2x4x6x6_three_filters():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 6, 6))
    w = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(3)
    out, _ = conv2d(x, LayerParams(weight=w, bias=b), pad=1)
    np.testing.assert_allclose(out, naive_conv2d(x, w, b, pad=1), atol=1e-9)


def test_batchnorm_running_mean_momentum():
    # channel 0 sees {1, 3}, channel 1 sees {-2, 2}
    x = np.array([[[[1.0]], [[-2.0]]], [[[3.0]], [[2.0]]]])
    p = LayerParams(
        gamma=np.ones(2), beta=np.zeros(2), running_mean=np.array([10.0, 4.0]), running_var=np.ones(2)
    )
    batchnorm(x, p, training=True, momentum=0.1)
    np.testing.assert_allclose(p.running_mean, [0.9 * 10 + 0.1 * 2, 0.9 * 4 + 0.1 * 0])


def test_global_avg_pool_3x5x7x7():
    x = np.random.default_rng(5).standard_normal((3, 5, 7, 7))
    out, _ = global_avg_pool(x)
    brute = np.array([[sum(x[n, c].ravel()) / 49 for c in range(5)] for n in range(3)])
    np.testing.assert_allclose(out[:, :, 0, 0], brute, atol=1e-6)


def test_fully_connected_hand_case():
    out, _ = fully_connected(np.array([[2.0, 3.0]]), LayerParams(weight=np.array([[1.0, 1.0]]), bias=np.array([1.0])))
    np.testing.assert_array_equal(out, [[6.0]])


def test_fully_connected_4x10_to_3():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((4, 10)), rng.standard_normal((3, 10)), rng.standard_normal(3)
    out, _ = fully_connected(x, LayerParams(weight=w, bias=b))
    np.testing.assert_allclose(out, naive_matmul(x, w.T) + b, atol=1e-9)


def test_dropout_monte_carlo():
    n = 100_000
    x = np.random.default_rng(9).uniform(0.5, 1.5, n)
    out, _ = dropout(x, 0.5, training=True, rng=Rng(4))
    survived = np.mean(out != 0)
    assert abs(survived - 0.5) <= 3 * math.sqrt(0.25 / n)
    assert abs(out.mean() - x.mean()) <= 0.02 * x.mean()


def test_se_block_matches_composition():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 8, 4, 4))
    fc1 = LayerParams(weight=rng.standard_normal((2, 8)), bias=rng.standard_normal(2))
    fc2 = LayerParams(weight=rng.standard_normal((8, 2)), bias=rng.standard_normal(8))
    out, _ = se_block(x, fc1, fc2, reduction=4)
    s = x.mean(axis=(2, 3))
    z = np.maximum(s @ fc1.weight.T + fc1.bias, 0.0) @ fc2.weight.T + fc2.bias
    gate = 1.0 / (1.0 + np.exp(-z))
    np.testing.assert_allclose(out, x * gate[:, :, None, None], atol=1e-12)


def test_expansion_hidden_width():
    block = BlockParams(in_channels=24, out_channels=24, hidden=24 * 6, stride=1, expand_ratio=6, use_se=True)
    assert block.hidden == 144
    assert any(b.in_channels == 24 and b.expand_ratio == 6 and b.hidden == 144 for b in block_configs(ModelSpec()))


@pytest.mark.parametrize("value,multiple,expected", [(32.0, 8, 32), (96.0, 8, 96), (12.0, 8, 16), (11.9, 8, 8), (3.0, 8, 8)])
def test_round_to_multiple(value, multiple, expected):
    assert round_to_multiple(value, multiple) == expected


@pytest.mark.parametrize("width,stem", [(1.0, 32), (3.0, 96)])
def test_stem_channels(width, stem):
    assert ModelSpec(width_multiplier=width).scaled(32) == stem


@pytest.mark.parametrize("width,lo,hi", [(1.0, 11e6, 16e6), (3.0, 100e6, 140e6)])
def test_model_size_window(width, lo, hi):
    spec = ModelSpec(width_multiplier=width, num_classes=2)
    assert param_count(spec) == param_stats(spec).param_count
    assert lo <= param_stats(spec).bytes_f32 <= hi


@pytest.mark.slow
def test_width3_checkpoint_size_tracks_param_bytes(tmp_path):
    spec = ModelSpec(width_multiplier=3.0)
    model = build_model(spec, Rng(0))
    path = tmp_path / "w3.mmn"
    save_checkpoint(model, path)
    buffers = sum(v.nbytes for _, v in model.named_buffers())
    expected = param_stats(spec).bytes_f32 + buffers
    assert abs(path.stat().st_size - expected) <= 0.05 * expected


def test_manifest_shaped_like_competition_split(tmp_path):
    csv = tmp_path / "labels.csv"
    rows = ["id,label"] + [f"img{i:03d},{0 if i < 205 else 1}" for i in range(434)]
    csv.write_text("\n".join(rows) + "\n")
    labels = [label for _, label in read_labels(csv)]
    assert len(labels) == 434
    assert {0: labels.count(0), 1: labels.count(1)} == {0: 205, 1: 229}


def test_synthetic_balance_205_of_434():
    assert gen_synthetic(434, 205 / 434, seed=0, image_size=4).class_counts() == {0: 205, 1: 229}


def test_gensynth_balance_flag(tmp_path, capsys):
    assert main(["gensynth", "--n", "434", "--balance", "0.4724", "--image-size", "4", "--out", str(tmp_path / "d")]) == 0
    labels = [label for _, label in read_labels(tmp_path / "d" / "labels.csv")]
    assert labels.count(0) == 205


def test_fuse_average_three_members():
    np.testing.assert_allclose(fuse_average([[0.2, 0.8], [0.6, 0.4], [0.4, 0.6]]), [0.4, 0.6], atol=1e-12)


def test_fuse_max_renormalizes():
    np.testing.assert_allclose(fuse_max([[0.2, 0.8], [0.6, 0.4]]), [0.6 / 1.4, 0.8 / 1.4], atol=1e-12)
    np.testing.assert_allclose(fuse_max([[0.2, 0.8], [0.6, 0.4]]), [0.4286, 0.5714], atol=5e-5)


def test_average_majority_overrides_dissenter():
    fused = fuse_average([[0.1, 0.9], [0.2, 0.8], [0.7, 0.3]])
    np.testing.assert_allclose(fused, [1 / 3, 2 / 3], atol=1e-12)
    assert int(np.argmax(fused)) == 1


def test_weight1_rates():
    rates = binary_rates(ConfusionCounts(tp=36, fp=7, tn=17, fn=1))
    assert round(rates["sensitivity"], 4) == 0.9730
    assert round(rates["specificity"], 4) == 0.7083


def test_weight3_rates():
    rates = binary_rates(ConfusionCounts(tp=28, fp=3, tn=21, fn=9))
    assert round(rates["sensitivity"], 4) == 0.7568
    assert rates["specificity"] == 0.875


def test_equal_weight_ranking_of_weight1():
    report = MetricsReport(
        accuracy=0.0, auroc=0.8772, auprc=0.9069, sensitivity=0.0, specificity=0.0,
        metric_kind="auc", metric_value=0.8772, tp=0, fp=0, tn=0, fn=0,
    )
    assert ranking_score(report, {"auroc": 1.0, "auprc": 1.0}) == pytest.approx(0.89205, abs=1e-12)


def test_weight1_training_row_is_on_grid():
    cfg = TrainConfig.from_text("lr_max=1e-5\nwidth=1.0\nbatch_size=8\ndropout=0.01\n")
    assert (cfg.lr_max, cfg.width, cfg.batch_size, cfg.dropout) == (1e-5, 1.0, 8, 0.01)
