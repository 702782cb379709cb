from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tensor


class NumericError(ArithmeticError):
    pass


def _value(objective: Callable[[], Tensor]) -> float:
    v = float(np.asarray(objective().data).reshape(-1)[0])
    if not np.isfinite(v):
        raise NumericError(f"objective is not finite: {v}")
    return v


def grad_check(objective: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5,
               max_per_param: int | None = None, rng: np.random.Generator | None = None,
               return_details: bool = False, roundoff_ulps: float = 64.0):
    """Compare reverse-mode gradients against central differences.

    Returns the max over probed entries of |a - n| / max(|a|, |n|, 1e-8).
    ``max_per_param`` limits probing to that many randomly chosen entries of
    each parameter (all entries when None). The probe point must be a point
    where the objective is differentiable; kinks such as |x| at 0 are not
    supported.

    A discrepancy no larger than the rounding noise of the difference
    quotient (``roundoff_ulps`` ulps of |f| over 2h) counts as agreement;
    this covers parameters whose true gradient is exactly zero, where the
    numerical estimate is pure rounding. Pass 0 for the bare formula.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    out = objective()
    if not np.all(np.isfinite(out.data)):
        raise NumericError("objective is not finite at the probe point")
    if out.requires_grad:
        out.backward()
    analytic = [p.grad.copy() for p in params]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    details = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = _value(objective)
            flat[i] = orig - h
            fm = _value(objective)
            flat[i] = orig
            n = (fp - fm) / (2.0 * h)
            a = float(ga.reshape(-1)[i])
            noise = roundoff_ulps * np.finfo(float).eps * max(abs(fp), abs(fm)) / (2.0 * h)
            err = 0.0 if abs(a - n) <= noise else abs(a - n) / max(abs(a), abs(n), 1e-8)
            worst = max(worst, err)
            if return_details:
                details.append((p.name, int(i), a, n, err))
    if return_details:
        return worst, details
    return worst
