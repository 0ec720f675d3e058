"""Central finite-difference gradient checks for tape-recorded functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    with Tape() as tape:
        loss = loss_fn()
    return tape.backward(loss, params)


def numeric_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences, perturbing one entry at a time in place."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_errors(
    analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray], floor_fraction: float = 1e-3
) -> list[float]:
    """Per-tensor ``max|a - n| / max(max|a|, max|n|, floor)``.

    ``floor`` is ``floor_fraction`` times the largest gradient magnitude over
    all tensors, so tensors whose true gradient is structurally zero are not
    scored on finite-difference rounding noise alone.
    """
    scale = max((max(np.abs(a).max(initial=0), np.abs(n).max(initial=0)) for a, n in zip(analytic, numeric)),
                default=0.0)
    floor = max(floor_fraction * scale, 1e-12)
    errs = []
    for a, n in zip(analytic, numeric):
        denom = max(np.abs(a).max(initial=0), np.abs(n).max(initial=0), floor)
        errs.append(float(np.abs(a - n).max(initial=0) / denom))
    return errs


def max_relative_error(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, floor_fraction: float = 1e-3
) -> float:
    a = analytic_grads(loss_fn, params)
    n = numeric_grads(loss_fn, params, h)
    return max(relative_errors(a, n, floor_fraction), default=0.0)
