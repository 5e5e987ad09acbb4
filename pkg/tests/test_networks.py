import numpy as np
import pytest

from lipwords import ConfigError, Tensor
from lipwords.networks import (
    Dnn,
    ModelConfig,
    ResNet,
    build_frontend,
    build_variant,
    desk_config,
)

FULL = ModelConfig()
DESK = desk_config()


def test_frontend_parameter_count_exact():
    front = build_frontend(FULL, "3d", rng=np.random.default_rng(0))
    # 64 kernels of 5*7*7 on one channel, plus bias and BN gamma/beta
    assert front.parameter_count() == 64 * (5 * 7 * 7) + 64 + 128 == 15872


def test_frontend_flat_size_is_50176():
    assert FULL.frontend_flat_size() == 50176


def test_resnet_parameter_count_within_10pct_of_21m():
    core = ResNet(FULL, rng=np.random.default_rng(0))
    n = core.parameter_count()
    assert abs(n - 21_000_000) / 21_000_000 < 0.10, n


def test_dnn_parameter_count_and_widths():
    core = Dnn(FULL, rng=np.random.default_rng(0))
    n = core.parameter_count()
    assert abs(n - 20_000_000) / 20_000_000 < 0.10, n
    widths = [lin.weight.shape for lin in core.layers]
    assert widths == [(50176, 384), (384, 384), (384, 256)]


def test_bilstm_backend_parameter_count():
    net = build_variant("N7", FULL, seed=0)
    counts = net.parameter_counts()
    # four LSTMs of 4h(d+h+1) with d=h=256, plus a 512->500 classifier
    assert counts["backend"] == 4 * (4 * 256 * (256 + 256 + 1)) + 512 * 500 + 500 == 2357748
    assert abs(counts["backend"] - 2_400_000) / 2_400_000 < 0.10
    net5 = build_variant("N5", FULL, seed=0)
    assert abs(net5.parameter_counts()["backend"] - 2_400_000) / 2_400_000 < 0.10


def test_variant_total_is_sum_of_parts():
    net = build_variant("N7", FULL, seed=0)
    counts = net.parameter_counts()
    assert counts["total"] == counts["frontend"] + counts["core"] + counts["backend"]


def test_full_size_shape_pipeline():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(1, 1, 31, 112, 112)).astype(np.float32))
    front = build_frontend(FULL, "3d", rng=rng)
    front.set_training(False)
    maps = front(x)
    assert maps.shape == (1, 64, 31, 28, 28)
    assert int(np.prod(maps.shape[1:2] + maps.shape[3:])) == 50176

    net = build_variant("N7", FULL, seed=0)
    net.set_training(False)
    logits = net.forward(x)
    assert logits.shape == (31, 1, 500)


def test_resnet_output_shape_per_timestep():
    rng = np.random.default_rng(2)
    core = ResNet(DESK, rng=rng)
    core.set_training(False)
    h, w = DESK.frontend_spatial()
    x = Tensor(rng.normal(size=(31, DESK.frontend_channels, h, w)).astype(np.float32))
    assert core(x).shape == (31, DESK.feat_dim)


def test_resnet_is_per_timestep_independent():
    rng = np.random.default_rng(3)
    core = ResNet(DESK, rng=rng)
    core.set_training(False)
    h, w = DESK.frontend_spatial()
    x = rng.normal(size=(8, DESK.frontend_channels, h, w)).astype(np.float32)
    perm = rng.permutation(8)
    out = core(Tensor(x)).data
    out_perm = core(Tensor(x[perm])).data
    np.testing.assert_array_equal(out[perm], out_perm)


def test_zeroed_residual_branches_act_as_identity():
    rng = np.random.default_rng(4)
    core = ResNet(DESK, rng=rng)
    core.set_training(False)
    block = core.blocks[0]  # stage-1 block: no projection
    assert block.proj is None
    block.conv1.weight.data[:] = 0.0
    block.conv2.weight.data[:] = 0.0
    h, w = DESK.frontend_spatial()
    x = Tensor(rng.normal(size=(2, DESK.frontend_channels, h, w)).astype(np.float32))
    np.testing.assert_allclose(block(x).data, x.data, rtol=1e-6)


def test_tconv_temporal_lengths():
    net = build_variant("N2", DESK, seed=0)
    net.set_training(False)
    rng = np.random.default_rng(5)
    feats = Tensor(rng.normal(size=(2 * 31, DESK.feat_dim)).astype(np.float32))
    x = feats.reshape((2, 31, DESK.feat_dim)).transpose((0, 2, 1))
    y1 = net.backend.pool(net.backend.bn1(net.backend.conv1(x)).relu())
    assert y1.shape[2] == 15
    y2 = net.backend.pool(net.backend.bn2(net.backend.conv2(y1)).relu())
    assert y2.shape[2] == 7
    assert net.backend.forward(feats, 2, 31).shape == (2, DESK.vocab)


def test_tconv_mean_pool_constant_in_time():
    # the time-mean of a time-constant signal equals any single timestep
    rng = np.random.default_rng(6)
    one = rng.normal(size=(2, DESK.feat_dim, 1)).astype(np.float32)
    x = Tensor(np.repeat(one, 7, axis=2))
    pooled = x.mean(axis=2).data
    np.testing.assert_allclose(pooled, one[:, :, 0], rtol=1e-6)


def test_dnn_rejects_wrong_input_width():
    core = Dnn(DESK, rng=np.random.default_rng(7))
    with pytest.raises(ConfigError):
        core(Tensor(np.zeros((4, 7), dtype=np.float32)))


def test_bilstm_logits_shape_and_merge_widths():
    for variant, width in (("N5", DESK.lstm_hidden), ("N7", 2 * DESK.lstm_hidden)):
        net = build_variant(variant, DESK, seed=0)
        assert net.backend.rnn.out_width == width
        net.set_training(False)
        x = Tensor(np.random.default_rng(8).normal(
            size=(2, 1, DESK.frames, DESK.height, DESK.width)).astype(np.float32))
        assert net.forward(x).shape == (DESK.frames, 2, DESK.vocab)


def test_n1_and_n2_differ_only_in_frontend():
    n1 = build_variant("N1", DESK, seed=0)
    n2 = build_variant("N2", DESK, seed=0)
    assert type(n1.frontend).__name__ == "Frontend2d"
    assert type(n2.frontend).__name__ == "Frontend3d"
    assert type(n1.core) is type(n2.core)
    assert type(n1.backend) is type(n2.backend)


def test_eval_mode_forward_is_deterministic():
    net = build_variant("N5", DESK, seed=0)
    net.set_training(False)
    x = Tensor(np.random.default_rng(9).normal(
        size=(1, 1, DESK.frames, DESK.height, DESK.width)).astype(np.float32))
    a = net.forward(x).data
    b = net.forward(x).data
    assert np.array_equal(a, b)


def test_concat_half_swap_with_permuted_classifier_rows():
    net = build_variant("N7", DESK, seed=10)
    net.set_training(False)
    rng = np.random.default_rng(10)
    feats = Tensor(rng.normal(size=(31, DESK.feat_dim)).astype(np.float32))
    merged = net.backend.rnn(feats.reshape((1, 31, DESK.feat_dim)).transpose((1, 0, 2)))
    h = DESK.lstm_hidden
    logits = (merged.reshape((31, 2 * h)) @ net.backend.fc.weight + net.backend.fc.bias).data

    swapped = np.concatenate([merged.data[..., h:], merged.data[..., :h]], axis=-1)
    w_perm = np.concatenate([net.backend.fc.weight.data[h:], net.backend.fc.weight.data[:h]], axis=0)
    logits_swapped = swapped.reshape(31, 2 * h) @ w_perm + net.backend.fc.bias.data
    # equal up to float32 summation-order noise; the ranking must be identical
    np.testing.assert_allclose(logits, logits_swapped, atol=1e-5)
    np.testing.assert_array_equal(logits.argmax(axis=1), logits_swapped.argmax(axis=1))


def test_unknown_variant_and_documented_baseline():
    with pytest.raises(ConfigError):
        build_variant("N9", DESK)
    with pytest.raises(ConfigError, match="documented"):
        build_variant("Baseline", DESK)


def test_frozen_variants_mark_trunk():
    net = build_variant("N5", DESK, seed=0)
    assert all(not p.requires_grad for p in net.frontend.named_parameters().values())
    assert all(not p.requires_grad for p in net.core.named_parameters().values())
    assert all(p.requires_grad for p in net.backend.named_parameters().values())
    net7 = build_variant("N7", DESK, seed=0)
    assert all(p.requires_grad for p in net7.named_parameters().values())
