"""Tensors, tapes, and gradient checking.

The engine records primitive operations on an explicit tape while a
``Tape`` context is active; ``backward`` replays it in reverse and fills
the ``grad`` slot of every tensor that asked for one.  A central
finite-difference oracle cross-checks any gradient the tape produces.
"""

import numpy as np

from lipwords import Tape, Tensor, backward
from lipwords.gradcheck import check_gradient
from lipwords.ops import log_softmax, matmul

print("== a scalar chain ==")
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
with Tape() as tape:
    y = (x * x).sum()          # d/dx sum(x^2) = 2x
backward(y, tape)
print("x      :", x.data)
print("grad   :", x.grad, "(expected 2x)")

print()
print("== gradients accumulate over paths ==")
x = Tensor([1.0, 4.0], requires_grad=True)
with Tape() as tape:
    y = (x + x).sum()          # two paths into the same leaf
backward(y, tape)
print("grad   :", x.grad, "(expected [2, 2])")

print()
print("== a small classifier, checked against finite differences ==")
rng = np.random.default_rng(0)
w = Tensor(rng.normal(scale=0.5, size=(6, 4)), dtype=np.float64)
labels = np.array([0, 3, 1])


def loss_of(weights):
    logits = matmul(Tensor(rng_x, dtype=np.float64), weights)
    # negative log likelihood of fixed labels
    picked = [log_softmax(logits).narrow(0, i, 1).narrow(1, labels[i], 1) for i in range(3)]
    total = picked[0].reshape(())
    for p in picked[1:]:
        total = total + p.reshape(())
    return -total


rng_x = rng.normal(size=(3, 6))
err = check_gradient(loss_of, w)
print(f"max relative error vs central differences: {err:.2e} (tolerance 1e-4)")
