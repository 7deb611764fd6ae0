"""Central finite-difference checks for the autograd engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-4,
    tol: float = 1e-4,
    max_coords: int = 10_000,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar closure against central differences.

    Every coordinate is probed unless the inputs hold more than ``max_coords``
    values, in which case a seeded random subset of that size is used. The
    relative error of a coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Inputs should be float64 for meaningful tolerances.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss = fn(*inputs)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.data.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[k] for k in pick]

    worst_err, worst_at = 0.0, None
    with no_grad():
        for i, j in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            f_plus = fn(*inputs).item()
            flat[j] = orig - step
            f_minus = fn(*inputs).item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = float(analytic[i].reshape(-1)[j])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (i, j)
    return GradCheckReport(worst_err, bool(worst_err < tol), len(coords), worst_at)
