"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, Tape, Tensor


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and finite differences.

    ``f`` must map a tensor to a scalar tensor and be deterministic.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return grad_check_many(lambda ts: f(ts[0]), [base], eps)


def grad_check_many(f: Callable[[Sequence[Tensor]], Tensor], xs: Sequence, eps: float = 1e-4) -> float:
    """Like :func:`grad_check` but perturbs every tensor in ``xs``."""
    bases = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in xs]
    leaves = [Tensor(b.copy(), requires_grad=True) for b in bases]
    with Tape() as tape:
        out = f(leaves)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        tape.backward(out)

    def evaluate(values) -> float:
        return float(np.asarray(f([Tensor(v) for v in values]).data).reshape(-1)[0])

    worst = 0.0
    for which, base in enumerate(bases):
        analytic = leaves[which].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        numeric = np.empty_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            def shifted(step):
                values = [b.copy() for b in bases]
                values[which].reshape(-1)[i] += step
                return evaluate(values)

            # five-point stencil: truncation error O(eps^4) instead of O(eps^2)
            flat[i] = (8.0 * (shifted(eps) - shifted(-eps)) - (shifted(2 * eps) - shifted(-2 * eps))) / (12.0 * eps)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst
