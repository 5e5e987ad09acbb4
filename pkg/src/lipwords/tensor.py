"""Dense float tensors with taped reverse-mode differentiation.

The engine records every primitive operation on an explicit tape in
execution order.  A backward pass walks the tape once, in reverse, and
accumulates gradients into the ``grad`` slot of every tensor that asked
for one.  Accumulation order is fixed by tape order, so two identical
runs produce bit-identical gradients.

Tensors are value-semantic numpy wrappers (row-major, float32 by default,
float64 for gradient checking).  A tape belongs to one execution thread;
tensors themselves may be handed freely between threads.
"""

from __future__ import annotations

import numpy as np


class LipwordsError(Exception):
    """Base class for all library errors."""


class ShapeError(LipwordsError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(LipwordsError):
    """An operation was invoked outside its contract."""


class NumericError(LipwordsError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(LipwordsError):
    """A network, schedule or dataset configuration is inconsistent."""


class DataError(LipwordsError):
    """An on-disk record is missing, truncated or malformed."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """A dense row-major float array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES):
            dtype = np.float32
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        # Fast path for op outputs: the array is already a float ndarray
        # produced by a primitive, so construction checks are skipped.
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag})"

    # Arithmetic operators are defined in ops.py and attached below to
    # keep the tape plumbing and the math rules in separate files.


class TapeNode:
    """One executed primitive: inputs, output, and its adjoint rule."""

    __slots__ = ("op", "inputs", "output", "pull")

    def __init__(self, op, inputs, output, pull):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.pull = pull  # out_grad -> tuple of input grads (None = no flow)


_TAPE_STACK = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of primitives; usable as a context manager."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def record(op, inputs, output, pull):
    """Register ``output = op(inputs)`` on the active tape, if any.

    The node is recorded only when some input participates in
    differentiation; the output then inherits requires_grad so that
    downstream ops keep recording.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, output, pull))
    return output


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into .grad for every participating tensor.

    Visits each recorded node exactly once, in reverse execution order.
    Gradients arriving over multiple paths add; the addition order is
    the (fixed) tape order, which keeps runs reproducible.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is non-finite")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        out_grad = node.output.grad
        if out_grad is None:
            continue  # this branch never reached the loss
        grads = node.pull(out_grad)
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient produced by '{node.op}'")
            # Rebinds only -- gradient arrays are never mutated in place,
            # so aliasing an upstream buffer on first assignment is safe.
            tensor.grad = g if tensor.grad is None else tensor.grad + g
