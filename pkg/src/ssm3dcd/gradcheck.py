"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the worst relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current ``param.data`` on every
    call and return a scalar.  The error for one entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``max_entries`` a random subset of
    that many entries (drawn across all params) is checked instead of all.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss = loss_fn()
    _require_finite(loss)
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    entries = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if max_entries is not None and max_entries < len(entries):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(entries), size=max_entries, replace=False)
        entries = [entries[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in entries:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        step = flat.dtype.type(eps)
        flat[j] = orig + step
        up = _scalar(loss_fn())
        flat[j] = orig - step
        down = _scalar(loss_fn())
        flat[j] = orig
        numeric = (up - down) / (2 * step)
        a = analytic[i].reshape(-1)[j]
        denom = max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, float(abs(a - numeric) / denom))
    return worst


def _scalar(loss: Tensor):
    _require_finite(loss)
    return loss.data.reshape(-1)[0]


def _require_finite(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError(f"non-finite loss {loss.data.reshape(-1)[0]}")
