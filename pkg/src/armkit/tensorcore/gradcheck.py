"""Finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from ..errors import UsageError
from .tensor import Tensor


def grad_check(loss_fn, params: dict[str, Tensor],
               eps: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    `loss_fn` must rebuild the graph from the current parameter data and
    return a scalar 64-bit tensor. Returns the maximum relative error
    with denominator max(|analytic|, |numeric|, 1e-8).
    """
    for p in params.values():
        if p.data.dtype != np.float64:
            raise UsageError("grad_check requires 64-bit parameters")
        p.grad = None
    out = loss_fn()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise UsageError("loss_fn must return a scalar tensor")
    out.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None
                    else np.zeros_like(p.data))
                for k, p in params.items()}

    max_rel = 0.0
    for key, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(ana[i]), abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(ana[i] - numeric) / denom)
    return max_rel
