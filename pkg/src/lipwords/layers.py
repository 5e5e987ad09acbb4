"""Neural network layers: convolution, batch norm, pooling, linear, LSTM.

Convolution here means cross-correlation (no kernel flip), the dominant
convention.  All layers work for float32 and float64 alike; gradient
checking builds float64 instances.

Modules discover parameters by attribute scan, so construction order
fixes parameter names and therefore checkpoint layout and optimizer
iteration order.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .tensor import ConfigError, ContractError, ShapeError, Tensor, record
from . import ops


class Module:
    """Base class for parameterised blocks.

    Parameters are Tensor attributes; persistent non-learnable state
    (batch-norm running statistics) is listed in ``buffer_names``.
    Children are Module attributes or lists of Modules.
    """

    buffer_names = ()
    training = False

    def named_parameters(self, prefix=""):
        out = {}
        for name, value in vars(self).items():
            full = prefix + name
            if isinstance(value, Tensor):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
        return out

    def named_buffers(self, prefix=""):
        return {name: getattr(owner, attr)
                for name, (owner, attr) in self.buffer_owners(prefix).items()}

    def buffer_owners(self, prefix=""):
        """Map buffer name -> (owning module, attribute) for reassignment."""
        out = {}
        for name, value in vars(self).items():
            full = prefix + name
            if name in type(self).buffer_names and isinstance(value, np.ndarray):
                out[full] = (self, name)
            elif isinstance(value, Module):
                out.update(value.buffer_owners(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.buffer_owners(f"{full}.{i}."))
        return out

    def submodules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.submodules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.submodules()

    def set_training(self, flag):
        for m in self.submodules():
            m.training = bool(flag)

    def set_requires_grad(self, flag):
        for p in self.named_parameters().values():
            p.requires_grad = bool(flag)

    def parameter_count(self):
        return sum(p.size for p in self.named_parameters().values())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _tuplify(value, nd):
    if isinstance(value, (tuple, list)):
        if len(value) != nd:
            raise ConfigError(f"expected {nd} per-axis values, got {value}")
        return tuple(int(v) for v in value)
    return (int(value),) * nd


def _out_extent(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def _windows(padded, kernel, stride):
    """Strided sliding-window view: [N, C, *out, *kernel]."""
    n, c = padded.shape[:2]
    spatial = padded.shape[2:]
    nd = len(kernel)
    out = tuple((spatial[i] - kernel[i]) // stride[i] + 1 for i in range(nd))
    shape = (n, c) + out + kernel
    st = padded.strides
    strides = (st[0], st[1]) + tuple(st[2 + i] * stride[i] for i in range(nd)) + st[2:]
    view = np.lib.stride_tricks.as_strided(padded, shape=shape, strides=strides, writeable=False)
    return view, out


def conv_forward(x, weight, bias, stride, padding):
    """Cross-correlation of [N, C_in, *spatial] with [C_out, C_in, *kernel]."""
    xd, w = x.data, weight.data
    kernel = w.shape[2:]
    nd = len(kernel)
    if xd.ndim != 2 + nd:
        raise ShapeError(f"conv{nd}d input must be rank {2 + nd}, got shape {tuple(xd.shape)}")
    if xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv{nd}d expects {w.shape[1]} input channels, got {xd.shape[1]}")
    out_sp = tuple(_out_extent(xd.shape[2 + i], kernel[i], stride[i], padding[i]) for i in range(nd))
    if any(e < 1 for e in out_sp):
        raise ShapeError(f"conv{nd}d output extent < 1 for input {tuple(xd.shape)} kernel {kernel} "
                         f"stride {stride} padding {padding}")

    n, c_out = xd.shape[0], w.shape[0]
    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    padded = np.pad(xd, pad_width) if any(padding) else xd
    view, _ = _windows(padded, kernel, stride)
    # [N, C, *out, *k] -> [N, *out, C, *k] -> [rows, C*prod(k)]
    order = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    rows = n * int(np.prod(out_sp))
    cols = view.transpose(order).reshape(rows, -1)
    wmat = w.reshape(c_out, -1)
    y = cols @ wmat.T
    if bias is not None:
        y = y + bias.data
    y = y.reshape((n,) + out_sp + (c_out,))
    y = np.ascontiguousarray(np.moveaxis(y, -1, 1))
    out = Tensor._wrap(y)

    padded_shape = padded.shape
    x_shape = xd.shape

    def pull(g):
        gmat = np.moveaxis(g, 1, -1).reshape(rows, c_out)
        g_w = (gmat.T @ cols).reshape(w.shape) if weight.requires_grad else None
        g_b = gmat.sum(axis=0) if bias is not None and bias.requires_grad else None
        g_x = None
        if x.requires_grad:
            dcols = gmat @ wmat  # [rows, C*prod(k)]
            g_x = _fold_columns(dcols, x_shape, padded_shape, kernel, stride, padding, out_sp)
        if bias is not None:
            return g_x, g_w, g_b
        return g_x, g_w

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(f"conv{nd}d", inputs, out, pull)


def _fold_columns(dcols, x_shape, padded_shape, kernel, stride, padding, out_sp):
    """Adjoint of im2col: scatter-add column gradients back onto the input."""
    nd = len(kernel)
    n, c = x_shape[:2]
    dc = dcols.reshape((n,) + out_sp + (c,) + kernel)
    # -> [N, C, *out, *k]
    dc = dc.transpose((0, 1 + nd) + tuple(range(1, 1 + nd)) + tuple(range(2 + nd, 2 + 2 * nd)))
    buf = np.zeros(padded_shape, dtype=dcols.dtype)
    head = (slice(None), slice(None))
    for offsets in itertools.product(*(range(k) for k in kernel)):
        target = head + tuple(
            slice(offsets[i], offsets[i] + out_sp[i] * stride[i], stride[i]) for i in range(nd)
        )
        buf[target] += dc[head + (slice(None),) * nd + offsets]
    crop = head + tuple(slice(padding[i], padding[i] + x_shape[2 + i]) for i in range(nd))
    return buf[crop] if any(padding) else buf


def max_pool_forward(x, kernel, stride, padding):
    """Windowed maximum; backward routes to the argmax (lowest flat index on ties)."""
    xd = x.data
    nd = len(kernel)
    if xd.ndim != 2 + nd:
        raise ShapeError(f"maxpool{nd}d input must be rank {2 + nd}, got shape {tuple(xd.shape)}")
    out_sp = tuple(_out_extent(xd.shape[2 + i], kernel[i], stride[i], padding[i]) for i in range(nd))
    if any(e < 1 for e in out_sp):
        raise ShapeError(f"maxpool output extent < 1 for input {tuple(xd.shape)}")
    n, c = xd.shape[:2]
    pad_width = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    padded = np.pad(xd, pad_width, constant_values=-np.inf) if any(padding) else xd
    view, _ = _windows(padded, kernel, stride)
    rows = n * c * int(np.prod(out_sp))
    flat = view.reshape(rows, -1)
    argmax = flat.argmax(axis=1)  # first max = lowest flat index within the window
    y = flat[np.arange(rows), argmax].reshape((n, c) + out_sp)
    if np.isinf(y).any():
        raise ContractError("max-pool window covered only padding")
    out = Tensor._wrap(np.ascontiguousarray(y))

    padded_shape = padded.shape

    def pull(g):
        if not x.requires_grad:
            return (None,)
        # absolute coordinates of each window's winner inside the padded array
        grid = np.unravel_index(np.arange(rows), (n, c) + out_sp)
        offs = np.unravel_index(argmax, kernel)
        coords = (grid[0], grid[1]) + tuple(
            grid[2 + i] * stride[i] + offs[i] for i in range(nd)
        )
        buf = np.zeros(padded_shape, dtype=g.dtype)
        np.add.at(buf.ravel(), np.ravel_multi_index(coords, padded_shape), g.ravel())
        crop = (slice(None), slice(None)) + tuple(
            slice(padding[i], padding[i] + xd.shape[2 + i]) for i in range(nd)
        )
        return (buf[crop] if any(padding) else buf,)

    return record(f"maxpool{nd}d", (x,), out, pull)


class Conv(Module):
    """1D/2D/3D convolution; dimensionality follows the kernel tuple."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 bias=True, dtype=np.float32, rng=None):
        kernel = tuple(int(k) for k in (kernel if isinstance(kernel, (tuple, list)) else (kernel,)))
        nd = len(kernel)
        if nd not in (1, 2, 3):
            raise ConfigError(f"kernel must have 1-3 axes, got {kernel}")
        stride = _tuplify(stride, nd)
        padding = _tuplify(padding, nd)
        if min(kernel) < 1 or min(stride) < 1 or min(padding) < 0:
            raise ConfigError(f"bad conv spec kernel={kernel} stride={stride} padding={padding}")
        rng = rng or np.random.default_rng()
        fan_in = in_channels * int(np.prod(kernel))
        bound = math.sqrt(1.0 / fan_in)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_channels, in_channels) + kernel).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv_forward(x, self.weight, self.bias, self.stride, self.padding)


class MaxPool(Module):
    def __init__(self, kernel, stride=None, padding=0):
        kernel = tuple(int(k) for k in (kernel if isinstance(kernel, (tuple, list)) else (kernel,)))
        self.kernel = kernel
        self.stride = _tuplify(stride if stride is not None else kernel, len(kernel))
        self.pad = _tuplify(padding, len(kernel))

    def forward(self, x):
        return max_pool_forward(x, self.kernel, self.stride, self.pad)


class BatchNorm(Module):
    """Per-channel normalization over batch and spatial axes.

    Train mode normalizes by batch statistics (biased variance) and
    updates running statistics (unbiased variance) with momentum 0.1;
    eval mode normalizes by the running statistics.
    """

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        if eps <= 0:
            raise ConfigError("batch norm eps must be positive")
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        xd = x.data
        if xd.ndim < 2 or xd.shape[1] != self.gamma.size:
            raise ShapeError(f"batch norm over {self.gamma.size} channels got input {tuple(xd.shape)}")
        axes = (0,) + tuple(range(2, xd.ndim))
        cshape = (1, xd.shape[1]) + (1,) * (xd.ndim - 2)
        gamma_r = self.gamma.data.reshape(cshape)

        if self.training:
            m = int(np.prod([xd.shape[i] for i in axes]))
            if m < 2:
                raise ContractError("batch norm in train mode needs >= 2 values per channel")
            mean = xd.mean(axis=axes, keepdims=True)
            var = xd.var(axis=axes, keepdims=True)  # biased
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (xd - mean) * inv
            y = gamma_r * xhat + self.beta.data.reshape(cshape)
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean.ravel()).astype(xd.dtype)
            self.running_var = ((1 - mom) * self.running_var
                                + mom * var.ravel() * (m / (m - 1))).astype(xd.dtype)

            def pull(g):
                g_beta = g.sum(axis=axes)
                g_gamma = (g * xhat).sum(axis=axes)
                g_x = None
                if x.requires_grad:
                    g_mean = g.mean(axis=axes, keepdims=True)
                    gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
                    g_x = gamma_r * inv * (g - g_mean - xhat * gx_mean)
                return g_x, g_gamma, g_beta

        else:
            mean, var = self.running_mean, self.running_var
            inv = 1.0 / np.sqrt(var + self.eps)
            scale = (self.gamma.data * inv).reshape(cshape)
            y = scale * xd + (self.beta.data - self.gamma.data * inv * mean).reshape(cshape)

            def pull(g):
                xhat = (xd - mean.reshape(cshape)) * inv.reshape(cshape)
                g_beta = g.sum(axis=axes)
                g_gamma = (g * xhat).sum(axis=axes)
                g_x = g * scale if x.requires_grad else None
                return g_x, g_gamma, g_beta

        out = Tensor._wrap(y)
        return record("batchnorm", (x, self.gamma, self.beta), out, pull)


class Linear(Module):
    """y = x @ weight + bias with weight stored as [in_features, out_features]."""

    def __init__(self, in_features, out_features, bias=True, dtype=np.float32, rng=None):
        rng = rng or np.random.default_rng()
        bound = math.sqrt(1.0 / in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(in_features, out_features)).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LstmCell(Module):
    """Single LSTM cell; gate blocks ordered (input, forget, cell, output).

    c' = f*c + i*g,  h' = o*tanh(c')  with i,f,o = sigmoid and g = tanh.
    Weights are uniform in +-sqrt(1/hidden); the forget-gate bias starts
    at +1 to keep early memory open.
    """

    def __init__(self, input_size, hidden_size, dtype=np.float32, rng=None):
        rng = rng or np.random.default_rng()
        bound = math.sqrt(1.0 / hidden_size)
        self.w_input = Tensor(rng.uniform(-bound, bound, size=(input_size, 4 * hidden_size)).astype(dtype),
                              requires_grad=True)
        self.w_recur = Tensor(rng.uniform(-bound, bound, size=(hidden_size, 4 * hidden_size)).astype(dtype),
                              requires_grad=True)
        b = np.zeros(4 * hidden_size, dtype=dtype)
        b[hidden_size:2 * hidden_size] = 1.0
        self.bias = Tensor(b, requires_grad=True)
        self.hidden_size = hidden_size

    def step(self, x_t, h, c):
        hs = self.hidden_size
        gates = ops.matmul(x_t, self.w_input) + ops.matmul(h, self.w_recur) + self.bias
        i = gates.narrow(1, 0, hs).sigmoid()
        f = gates.narrow(1, hs, hs).sigmoid()
        g = gates.narrow(1, 2 * hs, hs).tanh()
        o = gates.narrow(1, 3 * hs, hs).sigmoid()
        c_next = f * c + i * g
        h_next = o * c_next.tanh()
        return h_next, c_next

    def run(self, steps, reverse=False):
        """Run over a list of [N, d] tensors; returns hidden states in input order."""
        n = steps[0].shape[0]
        dtype = steps[0].dtype
        h = Tensor._wrap(np.zeros((n, self.hidden_size), dtype=dtype))
        c = Tensor._wrap(np.zeros((n, self.hidden_size), dtype=dtype))
        order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
        outputs = [None] * len(steps)
        for t in order:
            h, c = self.step(steps[t], h, c)
            outputs[t] = h
        return outputs


class BiLstm(Module):
    """Stacked bidirectional LSTM over a [T, N, d] sequence.

    Between stacked layers the two directions are summed; the final
    output is merged per ``merge`` ("add" keeps width hidden, "concat"
    doubles it).  Every output step depends on the whole sequence.
    """

    def __init__(self, input_size, hidden_size, num_layers=2, merge="concat",
                 merge_between="add", dtype=np.float32, rng=None):
        if merge not in ("add", "concat") or merge_between not in ("add", "concat"):
            raise ConfigError(f"unknown merge mode {merge!r}/{merge_between!r}")
        if num_layers < 1:
            raise ConfigError("need at least one layer")
        rng = rng or np.random.default_rng()
        self.forward_cells = []
        self.backward_cells = []
        width = input_size
        for _ in range(num_layers):
            self.forward_cells.append(LstmCell(width, hidden_size, dtype=dtype, rng=rng))
            self.backward_cells.append(LstmCell(width, hidden_size, dtype=dtype, rng=rng))
            width = hidden_size if merge_between == "add" else 2 * hidden_size
        self.merge = merge
        self.merge_between = merge_between
        self.num_layers = num_layers
        self.out_width = hidden_size if merge == "add" else 2 * hidden_size

    def forward(self, seq):
        if seq.ndim != 3:
            raise ShapeError(f"bilstm expects [T, N, d], got {tuple(seq.shape)}")
        t_len = seq.shape[0]
        if t_len < 1:
            raise ShapeError("empty sequence")
        if seq.shape[2] != self.forward_cells[0].w_input.shape[0]:
            raise ConfigError(f"bilstm built for input width {self.forward_cells[0].w_input.shape[0]}, "
                              f"got {seq.shape[2]}")
        steps = [seq.narrow(0, t, 1).reshape((seq.shape[1], seq.shape[2])) for t in range(t_len)]
        for layer in range(self.num_layers):
            fwd = self.forward_cells[layer].run(steps)
            bwd = self.backward_cells[layer].run(steps, reverse=True)
            last = layer == self.num_layers - 1
            mode = self.merge if last else self.merge_between
            if mode == "add":
                steps = [f + b for f, b in zip(fwd, bwd)]
            else:
                steps = [ops.concat([f, b], axis=1) for f, b in zip(fwd, bwd)]
        return ops.stack(steps, axis=0)
