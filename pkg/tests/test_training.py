import math

import numpy as np
import pytest

from lipwords import ConfigError, ContractError, Tape, Tensor, backward
from lipwords.data import gen_synthetic
from lipwords.gradcheck import autodiff_grad, finite_diff_grad, relative_error
from lipwords.networks import build_variant, desk_config
from lipwords.training import (
    BILSTM_SCHEDULE,
    TCONV_SCHEDULE,
    EarlyStop,
    LrSchedule,
    SgdMomentum,
    aggregated_loss,
    run_training,
    train_batch,
    train_epoch,
    evaluate_topk,
)


# ---------------------------------------------------------------- loss

def test_uniform_logits_every_step_loss():
    logits = Tensor(np.zeros((31, 2, 500), dtype=np.float32))
    loss = aggregated_loss(logits, np.array([7, 433]), "every_step")
    expected = 31.0 * math.log(500.0)
    assert abs(loss.item() - expected) / expected < 1e-6


def test_uniform_logits_last_step_loss():
    logits = Tensor(np.zeros((31, 2, 500), dtype=np.float32))
    loss = aggregated_loss(logits, np.array([7, 433]), "last_step")
    assert loss.item() == pytest.approx(math.log(500.0), rel=1e-6)


def test_saturated_correct_logits_give_near_zero_loss():
    logits = np.zeros((4, 3, 20), dtype=np.float32)
    labels = np.array([5, 0, 19])
    for n, lab in enumerate(labels):
        logits[:, n, lab] = 30.0  # margin 30 over every other word
    loss = aggregated_loss(Tensor(logits), labels, "every_step")
    assert 0.0 <= loss.item() < 1e-9 * 4


def test_every_step_equals_running_sum_of_last_step_losses_exactly():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(13, 4, 9)).astype(np.float32)
    labels = np.array([1, 8, 0, 3])
    every = aggregated_loss(Tensor(logits), labels, "every_step").item()
    acc = np.float32(0.0)
    for t in range(13):
        step = aggregated_loss(Tensor(logits[: t + 1]), labels, "last_step").item()
        acc = np.float32(acc + np.float32(step))
    assert np.float32(every) == acc


def test_loss_is_nonnegative():
    rng = np.random.default_rng(1)
    for seed in range(5):
        logits = Tensor(rng.normal(size=(6, 3, 11)).astype(np.float32))
        labels = rng.integers(0, 11, size=3)
        assert aggregated_loss(logits, labels, "every_step").item() >= 0.0


def test_loss_rejects_out_of_range_label():
    logits = Tensor(np.zeros((3, 2, 5), dtype=np.float32))
    with pytest.raises(ContractError):
        aggregated_loss(logits, np.array([0, 5]))
    with pytest.raises(ContractError):
        aggregated_loss(logits, np.array([-1, 0]))


def test_single_logit_vector_input():
    logits = Tensor(np.zeros((3, 8), dtype=np.float32))
    loss = aggregated_loss(logits, np.array([0, 1, 2]), "every_step")
    assert loss.item() == pytest.approx(math.log(8.0), rel=1e-6)


@pytest.mark.parametrize("mode", ["every_step", "last_step"])
def test_loss_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(2)
    labels = np.array([2, 0])
    x = Tensor(rng.normal(size=(4, 2, 6)), dtype=np.float64)

    def f(t):
        return aggregated_loss(t, labels, mode)

    err = relative_error(autodiff_grad(f, x), finite_diff_grad(f, x))
    assert err < 1e-4


# ---------------------------------------------------------------- sgd

def _param(value):
    t = Tensor(np.array(value, dtype=np.float32), requires_grad=True)
    return t


def test_sgd_first_step():
    p = _param([1.0])
    p.grad = np.array([1.0], dtype=np.float32)
    opt = SgdMomentum()
    opt.step({"p": p}, lr=0.1)
    np.testing.assert_allclose(p.data, [0.9], rtol=1e-6)


def test_sgd_second_step_velocity():
    p = _param([0.0])
    opt = SgdMomentum()
    for _ in range(2):
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step({"p": p}, lr=0.1)
    # v = 1 then v = 1.9: total displacement 0.1 + 0.19
    np.testing.assert_allclose(p.data, [-0.29], rtol=1e-6)


def test_sgd_skips_frozen_parameters():
    p = _param([1.0])
    p.requires_grad = False
    p.grad = np.array([5.0], dtype=np.float32)
    SgdMomentum().step({"p": p}, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0])


# ---------------------------------------------------------------- schedule

def test_schedule_endpoints_and_midpoint():
    s = LrSchedule(5e-3, 5e-5, epochs=21)
    assert s.at(0) == pytest.approx(5e-3)
    assert s.at(20) == pytest.approx(5e-5)
    assert s.at(10) == pytest.approx(5e-4, rel=1e-9)  # geometric mean


def test_default_schedules():
    assert TCONV_SCHEDULE.initial == 5e-3 and TCONV_SCHEDULE.final == 5e-5
    assert BILSTM_SCHEDULE.initial == 5e-4 and BILSTM_SCHEDULE.final == 5e-5


def test_schedule_strictly_decreasing():
    s = LrSchedule(5e-3, 5e-5, epochs=20)
    values = [s.at(e) for e in range(20)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_schedule_rejects_short_decay():
    with pytest.raises(ConfigError):
        LrSchedule(1e-2, 1e-3, epochs=1)
    # constant schedule of one epoch is fine
    assert LrSchedule(1e-2, 1e-2, epochs=1).at(0) == 1e-2


# ---------------------------------------------------------------- early stop

def test_early_stop_improving_sequence_continues():
    stop = EarlyStop()
    assert all(stop.update(v) for v in (0.50, 0.55, 0.60))


def test_early_stop_fires_after_patience_exceeded():
    stop = EarlyStop(patience=3)
    assert stop.update(0.60)
    results = [stop.update(0.59) for _ in range(4)]
    assert results == [True, True, True, False]


def test_early_stop_tie_is_not_improvement():
    stop = EarlyStop(patience=1)
    stop.update(0.6)
    assert stop.update(0.6) is True  # stale 1 == patience
    assert stop.update(0.6) is False


# ---------------------------------------------------------------- epochs

DESK = desk_config(vocab=3)


@pytest.fixture(scope="module")
def train_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("train-data")
    return gen_synthetic(root, vocab_size=3, clips_per_word=6, seed=21,
                         frames=DESK.frames, frame_size=DESK.height + 10)


def test_train_epoch_deterministic(train_dataset):
    def run():
        net = build_variant("N2", DESK, seed=3)
        opt = SgdMomentum()
        return [train_epoch(net, train_dataset, opt, 5e-3, epoch_seed=[1, e], batch_size=4)
                for e in range(2)]

    assert run() == run()


def test_empty_validation_split_is_config_error(train_dataset):
    net = build_variant("N2", DESK, seed=3)
    with pytest.raises(ConfigError):
        evaluate_topk(net, train_dataset, "missing")


def test_batch_size_one_rejected(train_dataset):
    net = build_variant("N2", DESK, seed=3)
    with pytest.raises(ConfigError):
        train_epoch(net, train_dataset, SgdMomentum(), 5e-3, epoch_seed=1, batch_size=1)


def test_overfit_tiny_batch_smoke(train_dataset):
    # a fast cousin of the acceptance overfit run: a few clips, many steps
    from lipwords.data import load_batches

    net = build_variant("N2", DESK, seed=4)
    clips, labels = next(load_batches(train_dataset, "train", 6))
    opt = SgdMomentum()
    net.set_training(True)
    losses = [train_batch(net, clips, labels, opt, 5e-3) for _ in range(60)]
    net.set_training(False)
    assert losses[-1] < losses[0] * 0.1


def test_frozen_trunk_stays_bit_identical_and_in_eval_mode(train_dataset):
    net = build_variant("N5", DESK, seed=5)
    trunk_before = {name: p.data.copy() for name, p in net.named_parameters().items()
                    if name.startswith(("frontend.", "core."))}
    stats_before = {name: b.copy() for name, b in net.named_buffers().items()}
    run_training(net, train_dataset, LrSchedule(5e-4, 5e-4, epochs=1), seed=0,
                 stage=2, batch_size=4, fixed_epochs=1)
    for name, p in net.named_parameters().items():
        if name in trunk_before:
            assert np.array_equal(p.data, trunk_before[name]), name
    for name, b in net.named_buffers().items():
        if name.startswith(("frontend.", "core.")):
            assert np.array_equal(b, stats_before[name]), name
