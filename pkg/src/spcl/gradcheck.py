"""Central finite-difference verification of recorded gradients."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor, backward, no_grad, zero_grads


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
) -> float:
    """Return the max relative error between recorded and numeric gradients.

    ``f`` re-evaluates a scalar objective from the current contents of
    ``params`` (trainable leaves).  The error for each parameter entry is
    ``|analytic - numeric| / max(1, |numeric|)`` with the numeric value from
    central differences; the actual float32 perturbations are measured in
    float64 so the divisor matches what was really applied.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")

    zero_grads(params)
    loss = f()
    if not np.isfinite(loss.data):
        raise NumericError("objective is non-finite at the evaluation point")
    backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros(p.shape, np.float32)
        for p in params
    ]

    worst = 0.0
    with no_grad():
        for p, ana in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + np.float32(h)
                up = float(flat[i])
                f_plus = float(f().data)
                flat[i] = orig - np.float32(h)
                down = float(flat[i])
                f_minus = float(f().data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericError(
                        f"objective non-finite while perturbing entry {i}"
                    )
                numeric = (f_plus - f_minus) / (up - down)
                err = abs(float(aflat[i]) - numeric) / max(1.0, abs(numeric))
                if err > worst:
                    worst = err
    return worst
