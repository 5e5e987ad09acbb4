"""Named gradient checks for every differentiable layer.

Each check builds a float64 instance of one layer family from a seed,
wraps it in a scalar read-out, and compares the taped gradient against
central differences for the input and for every parameter.  The suite
backs both the ``gradcheck`` command and the release gate.

Pooling inputs are drawn as scaled permutations so window maxima stay
well separated; otherwise a tie could flip under the probe epsilon.
"""

from __future__ import annotations

import numpy as np

from .tensor import ConfigError, Tensor
from . import ops
from .gradcheck import autodiff_grad, finite_diff_grad, relative_error
from .layers import BatchNorm, BiLstm, Conv, Linear, LstmCell, MaxPool
from .training import aggregated_loss

TOLERANCE = 1e-4
EPS = 1e-5


def _mix(rng, shape):
    return Tensor(rng.normal(size=shape), dtype=np.float64)


def _check_io(build, x0, param_holders, rng):
    """Max relative FD error over the input and every listed parameter."""

    def err_for(f, probe):
        return relative_error(autodiff_grad(f, probe), finite_diff_grad(f, probe, eps=EPS))

    worst = err_for(lambda t: build(t), Tensor(x0, dtype=np.float64))
    fixed_x = Tensor(x0, dtype=np.float64)
    for holder, attr in param_holders:
        def f(t, holder=holder, attr=attr):
            saved = getattr(holder, attr)
            setattr(holder, attr, t)
            try:
                return build(fixed_x)
            finally:
                setattr(holder, attr, saved)

        worst = max(worst, err_for(f, getattr(holder, attr)))
    return worst


def _permuted(rng, shape):
    size = int(np.prod(shape))
    return 0.01 * rng.permutation(np.arange(size, dtype=np.float64)).reshape(shape)


def check_matmul(seed):
    rng = np.random.default_rng(seed)
    b = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
    mix = _mix(rng, (4, 5))
    return _check_io(lambda t: (ops.matmul(t, b) * mix).sum(), rng.normal(size=(4, 3)), [], rng)


def check_conv1d(seed):
    rng = np.random.default_rng(seed)
    conv = Conv(2, 3, (3,), stride=1, padding=1, dtype=np.float64, rng=rng)
    mix = _mix(rng, (2, 3, 7))
    return _check_io(lambda t: (conv(t) * mix).sum(), rng.normal(size=(2, 2, 7)),
                     [(conv, "weight"), (conv, "bias")], rng)


def check_conv2d(seed):
    rng = np.random.default_rng(seed)
    conv = Conv(2, 3, (3, 3), stride=2, padding=1, dtype=np.float64, rng=rng)
    mix = _mix(rng, (1, 3, 3, 3))
    return _check_io(lambda t: (conv(t) * mix).sum(), rng.normal(size=(1, 2, 6, 6)),
                     [(conv, "weight"), (conv, "bias")], rng)


def check_conv3d(seed):
    rng = np.random.default_rng(seed)
    conv = Conv(2, 2, (3, 3, 3), stride=1, padding=1, dtype=np.float64, rng=rng)
    mix = _mix(rng, (1, 2, 4, 6, 6))
    return _check_io(lambda t: (conv(t) * mix).sum(), rng.normal(size=(1, 2, 4, 6, 6)),
                     [(conv, "weight"), (conv, "bias")], rng)


def check_batchnorm(seed):
    rng = np.random.default_rng(seed)
    bn = BatchNorm(3, dtype=np.float64)
    bn.gamma = Tensor(rng.uniform(0.5, 1.5, 3), dtype=np.float64, requires_grad=True)
    bn.beta = Tensor(rng.normal(size=3), dtype=np.float64, requires_grad=True)
    bn.set_training(True)
    mix = _mix(rng, (4, 3, 5))
    return _check_io(lambda t: (bn(t) * mix).sum(), rng.normal(size=(4, 3, 5)),
                     [(bn, "gamma"), (bn, "beta")], rng)


def check_maxpool(seed):
    rng = np.random.default_rng(seed)
    pool = MaxPool((3, 3), stride=(2, 2), padding=(1, 1))
    mix = _mix(rng, (2, 2, 3, 3))
    return _check_io(lambda t: (pool(t) * mix).sum(), _permuted(rng, (2, 2, 6, 6)), [], rng)


def check_linear(seed):
    rng = np.random.default_rng(seed)
    lin = Linear(5, 3, dtype=np.float64, rng=rng)
    mix = _mix(rng, (4, 3))
    return _check_io(lambda t: (lin(t) * mix).sum(), rng.normal(size=(4, 5)),
                     [(lin, "weight"), (lin, "bias")], rng)


def check_lstm(seed):
    rng = np.random.default_rng(seed)
    cell = LstmCell(3, 4, dtype=np.float64, rng=rng)
    mix = _mix(rng, (3, 2, 4))

    def run(x):
        steps = [x.narrow(0, t, 1).reshape((2, 3)) for t in range(3)]
        return (ops.stack(cell.run(steps)) * mix).sum()

    return _check_io(run, rng.normal(size=(3, 2, 3)),
                     [(cell, "w_input"), (cell, "w_recur"), (cell, "bias")], rng)


def check_bilstm(seed):
    rng = np.random.default_rng(seed)
    net = BiLstm(2, 3, num_layers=2, merge="concat", dtype=np.float64, rng=rng)
    mix = _mix(rng, (3, 2, 6))
    cell = net.forward_cells[0]
    return _check_io(lambda t: (net(t) * mix).sum(), rng.normal(size=(3, 2, 2)),
                     [(cell, "w_input"), (cell, "w_recur")], rng)


def check_loss(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 6, size=2)
    worst = 0.0
    for mode in ("every_step", "last_step"):
        def f(t, mode=mode):
            return aggregated_loss(t, labels, mode)

        probe = Tensor(rng.normal(size=(4, 2, 6)), dtype=np.float64)
        worst = max(worst, relative_error(autodiff_grad(f, probe),
                                          finite_diff_grad(f, probe, eps=EPS)))
    return worst


def check_chain(seed):
    """conv -> BN (train) -> ReLU -> linear on a 2-clip batch."""
    rng = np.random.default_rng(seed)
    conv = Conv(1, 2, (3, 3), stride=1, padding=1, dtype=np.float64, rng=rng)
    bn = BatchNorm(2, dtype=np.float64)
    bn.set_training(True)
    lin = Linear(2 * 5 * 5, 3, dtype=np.float64, rng=rng)
    labels = np.array([0, 2])

    def f(t):
        y = bn(conv(t)).relu()
        flat = y.reshape((2, 2 * 5 * 5))
        return aggregated_loss(lin(flat), labels)

    return _check_io(f, rng.normal(size=(2, 1, 5, 5)),
                     [(conv, "weight"), (lin, "weight")], rng)


CHECKS = {
    "matmul": check_matmul,
    "conv1d": check_conv1d,
    "conv2d": check_conv2d,
    "conv3d": check_conv3d,
    "batchnorm": check_batchnorm,
    "maxpool": check_maxpool,
    "linear": check_linear,
    "lstm": check_lstm,
    "bilstm": check_bilstm,
    "loss": check_loss,
    "chain": check_chain,
}


def run_suite(selector="all", seeds=tuple(range(10))):
    """Run gradient checks; returns {name: max relative error over seeds}."""
    if selector == "all":
        names = list(CHECKS)
    elif selector in CHECKS:
        names = [selector]
    else:
        raise ConfigError(f"unknown gradcheck selector {selector!r}; "
                          f"choose 'all' or one of {', '.join(CHECKS)}")
    return {name: max(CHECKS[name](seed) for seed in seeds) for name in names}
