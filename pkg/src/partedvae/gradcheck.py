"""Central finite-difference verification of reverse-mode gradients.

Must run in float64; the default step of 1e-5 (scaled by parameter magnitude)
paired with the 1e-4 relative-error budget is hopeless in float32.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["finite_difference_check"]


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``loss_fn`` must be a deterministic closure over ``params`` (freeze any
    sampling noise before calling). The step for each coordinate is scaled by
    max(1, |p|) so large parameters are perturbed proportionally. When
    ``max_entries_per_param`` is given, a random subset of coordinates is
    checked per parameter, which keeps the full-objective check affordable.
    """
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("finite_difference_check requires float64 parameters")

    loss = loss_fn()
    for p in params:
        p.grad = None
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = gen.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        an_flat = an.reshape(-1)
        for i in idx:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            f_plus = loss_fn().item()
            flat[i] = orig - step
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(numeric), abs(an_flat[i]), 1e-6)
            worst = max(worst, abs(numeric - an_flat[i]) / denom)
    return worst
