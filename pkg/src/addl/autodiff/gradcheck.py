from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list[float]
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients of ``fn`` with central finite differences.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes. The error for one input is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|, 1e-12)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def objective(vals: Sequence[np.ndarray]) -> float:
        with no_grad():
            return float((fn(*[Tensor(v) for v in vals]).data * proj).sum())

    out.backward(proj)
    errors = []
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        numeric = np.zeros_like(arrays[k])
        flat = numeric.reshape(-1)
        for i in range(arrays[k].size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k].reshape(-1)[i] += h
            minus[k].reshape(-1)[i] -= h
            flat[i] = (objective(plus) - objective(minus)) / (2 * h)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
        errors.append(float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    return GradCheckReport(max(errors, default=0.0), errors, tol)
