"""Finite-difference verification of backward rules.

``check_gradients`` runs a scalar-valued function of several Tensors, computes
analytic gradients via backward(), then perturbs every input entry by +/-h
(central differences) and compares. The error measure is the max-norm of the
difference relative to the larger of the two gradient norms, floored so that
all-zero gradients compare cleanly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, zero_grads


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to x.data."""
    base = x.data
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = float(f().data)
        flat[i] = keep - h
        fm = float(f().data)
        flat[i] = keep
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    num = float(np.max(np.abs(a - n))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(n))) if n.size else 0.0,
              1e-8)
    return num / den


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
) -> float:
    """Return the worst relative error between backward() and central differences."""
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = []
    for p in params:
        g = p.grad
        analytic.append(np.zeros_like(p.data) if g is None else np.array(g))
    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numeric_gradient(f, p, h=h)
        worst = max(worst, relative_error(ga, gn))
    zero_grads(params)
    return worst
