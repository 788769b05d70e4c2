"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError
from .layers import Params
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)

    def worst(self) -> str:
        if not self.per_param:
            return "<no parameters>"
        return max(self.per_param, key=self.per_param.get)


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def grad_check(
    f: Callable[[Params], Tensor], params: Params, eps: float = 1e-5
) -> GradCheckReport:
    """Compare reverse-mode gradients of a scalar loss against central differences.

    Every element of every parameter is perturbed by +-eps; the relative
    error uses max(1, |analytic|, |numeric|) as denominator so near-zero
    gradients are compared absolutely.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    for p in params.values():
        p.zero_grad()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the evaluation point")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    per_param: dict[str, float] = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            up = float(f(params).data)
            flat[i] = saved - eps
            down = float(f(params).data)
            flat[i] = saved
            num_flat[i] = (up - down) / (2.0 * eps)
        per_param[name] = _rel_err(analytic[name], numeric)
    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_rel_err=max_err, per_param=per_param)
