"""Finite-difference gradient oracle and autodiff cross-checking.

Central differences are computed coordinate by coordinate, so keep the
probed tensors small.  Checking runs in float64; central differences at
float32 lose too many digits to be trustworthy.
"""

from __future__ import annotations

import numpy as np

from .tensor import ContractError, NumericError, Tape, Tensor, backward


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of a tensor-to-scalar function.

    ``f`` must be deterministic; evaluate it in float64.  Returns an
    array shaped like ``x`` with (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps)
    per coordinate.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = _eval_scalar(f, base, x)
        flat[i] = saved - eps
        lo = _eval_scalar(f, base, x)
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def _eval_scalar(f, arr, template):
    out = f(Tensor(arr.copy(), requires_grad=False, dtype=np.float64))
    val = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(val):
        raise NumericError("function returned a non-finite value during finite differencing")
    return val


def autodiff_grad(f, x):
    """Gradient of ``f`` at ``x`` via a fresh tape and one backward pass."""
    probe = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    backward(out, tape)
    if probe.grad is None:
        return np.zeros_like(probe.data)
    return probe.grad


def relative_error(g_ad, g_fd):
    """max over coordinates of |ad - fd| / max(1, |ad| + |fd|)."""
    denom = np.maximum(1.0, np.abs(g_ad) + np.abs(g_fd))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def check_gradient(f, x, eps=1e-5):
    """Compare taped and finite-difference gradients; return the error."""
    return relative_error(autodiff_grad(f, x), finite_diff_grad(f, x, eps=eps))
