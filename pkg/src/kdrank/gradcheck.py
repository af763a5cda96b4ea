"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to ``param``.

    ``entries`` optionally restricts the perturbed flat indices; the rest of
    the returned array is NaN.
    """
    flat = param.data.reshape(-1)
    out = np.full(flat.size, np.nan)
    for i in range(flat.size) if entries is None else entries:
        keep = flat[i]
        flat[i] = keep + step
        up = loss_fn().item()
        flat[i] = keep - step
        down = loss_fn().item()
        flat[i] = keep
        out[i] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max over entries of |a - n| / max(|a|, |n|, floor); NaN entries skipped."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = ~np.isnan(n)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between backprop and finite differences over ``params``."""
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        entries = None
        if max_entries is not None and p.data.size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = rng.choice(p.data.size, size=max_entries, replace=False)
        worst = max(worst, relative_error(analytic, numerical_grad(loss_fn, p, step, entries), floor))
    return worst
