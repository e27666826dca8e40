"""Finite-difference gradient oracle.

Deliberately independent of the autodiff engine: it only evaluates the
function forward at perturbed copies of the input, so it can referee the
engine's backward pass.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def fd_gradient_oracle(f, x, step: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = x0.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        fp = _scalar(f(Tensor(bumped.reshape(x0.shape))))
        bumped[i] = flat[i] - step
        fm = _scalar(f(Tensor(bumped.reshape(x0.shape))))
        grad[i] = (fp - fm) / (2.0 * step)
    return Tensor(grad.reshape(x0.shape))


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)


def max_relative_error(analytic, numeric) -> float:
    """max |a - n| / max(1, |n|), the comparison used by the gradient suite."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric)
    denom = np.maximum(1.0, np.abs(n))
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
