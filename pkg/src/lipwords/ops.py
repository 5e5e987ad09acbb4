"""Differentiable primitive operations on tensors.

Every function computes its forward value with numpy and registers an
adjoint rule on the active tape via ``record``.  Elementwise arithmetic
broadcasts like numpy; the adjoint sums gradients back down to each
operand's shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, record


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    b = _as_tensor(b, a)
    out = Tensor._wrap(a.data + b.data)

    def pull(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, pull)


def sub(a, b):
    b = _as_tensor(b, a)
    out = Tensor._wrap(a.data - b.data)

    def pull(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", (a, b), out, pull)


def mul(a, b):
    b = _as_tensor(b, a)
    out = Tensor._wrap(a.data * b.data)

    def pull(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", (a, b), out, pull)


def neg(a):
    out = Tensor._wrap(-a.data)
    return record("neg", (a,), out, lambda g: (-g,))


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs [m,k] x [k,n], got {tuple(a.shape)} x {tuple(b.shape)}")
    out = Tensor._wrap(a.data @ b.data)

    def pull(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record("matmul", (a, b), out, pull)


def tensor_sum(a, axis=None, keepdims=False):
    out = Tensor._wrap(a.data.sum(axis=axis, keepdims=keepdims))

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return record("sum", (a,), out, pull)


def tensor_mean(a, axis=None, keepdims=False):
    out = Tensor._wrap(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def pull(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return record("mean", (a,), out, pull)


def relu(a):
    out = Tensor._wrap(np.maximum(a.data, 0))

    def pull(g):
        return (g * (a.data > 0),)

    return record("relu", (a,), out, pull)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    y = _stable_sigmoid(a.data)
    out = Tensor._wrap(y)

    def pull(g):
        return (g * y * (1.0 - y),)

    return record("sigmoid", (a,), out, pull)


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor._wrap(y)

    def pull(g):
        return (g * (1.0 - y * y),)

    return record("tanh", (a,), out, pull)


def exp(a):
    y = np.exp(a.data)
    out = Tensor._wrap(y)
    return record("exp", (a,), out, lambda g: (g * y,))


def log(a):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor._wrap(np.log(a.data))
    return record("log", (a,), out, lambda g: (g / a.data,))


def reshape(a, shape):
    out = Tensor._wrap(a.data.reshape(shape))
    return record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    inverse = tuple(np.argsort(axes))
    out = Tensor._wrap(a.data.transpose(axes))
    return record("transpose", (a,), out, lambda g: (g.transpose(inverse),))


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {tuple(a.shape)}")
    index = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))
    out = Tensor._wrap(a.data[index])

    def pull(g):
        buf = np.zeros(a.shape, dtype=g.dtype)
        buf[index] = g
        return (buf,)

    return record("narrow", (a,), out, pull)


def concat(tensors, axis=0):
    out = Tensor._wrap(np.concatenate([t.data for t in tensors], axis=axis))
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def pull(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record("concat", tuple(tensors), out, pull)


def stack(tensors, axis=0):
    out = Tensor._wrap(np.stack([t.data for t in tensors], axis=axis))

    def pull(g):
        return tuple(np.moveaxis(g, axis, 0))

    return record("stack", tuple(tensors), out, pull)


def log_softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor._wrap(y)

    def pull(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", (a,), out, pull)


def pick_class(a, labels):
    """Select a[..., n, labels[n]] along the last axis.

    Accepts [N, V] or [T, N, V]; the label vector indexes the batch axis
    and is shared by all leading timesteps.
    """
    labels = np.asarray(labels)
    idx = labels.reshape((1,) * (a.ndim - 2) + (-1, 1))
    picked = np.take_along_axis(a.data, np.broadcast_to(idx, a.shape[:-1] + (1,)), axis=-1)
    out = Tensor._wrap(picked[..., 0])

    def pull(g):
        buf = np.zeros(a.shape, dtype=g.dtype)
        np.put_along_axis(buf, np.broadcast_to(idx, a.shape[:-1] + (1,)), g[..., None], axis=-1)
        return (buf,)

    return record("pick_class", (a,), out, pull)


def _method(name, fn):
    setattr(Tensor, name, fn)


_method("__add__", add)
_method("__radd__", lambda a, b: add(a, b))
_method("__sub__", sub)
_method("__mul__", mul)
_method("__rmul__", lambda a, b: mul(a, b))
_method("__neg__", neg)
_method("__matmul__", matmul)
_method("sum", tensor_sum)
_method("mean", tensor_mean)
_method("reshape", reshape)
_method("transpose", transpose)
_method("narrow", narrow)
_method("relu", relu)
_method("sigmoid", sigmoid)
_method("tanh", tanh)
_method("exp", exp)
_method("log", log)
