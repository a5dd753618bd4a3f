"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

# Entries below this many roundoff units of the difference quotient cannot be
# resolved to four significant digits, so they are compared absolutely.
RESOLUTION_UNITS = 1e4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero entries from dominating."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_samples: int = 100,
    h: float = 1e-6,
    seed: int = 0,
) -> dict:
    """Compare backward gradients with central differences on sampled entries.

    ``loss_fn`` must rebuild the graph from the current ``params`` on every
    call. Up to ``n_samples`` scalar entries are drawn uniformly across all
    parameters (all of them when there are fewer).

    Relative errors use a floor of ``RESOLUTION_UNITS * eps * max(|loss|, 1) / h``
    (at least 1e-7): below it the difference quotient is dominated by
    floating-point cancellation rather than by the gradient.

    Returns a dict with ``max_rel_error``, ``n_checked``, ``floor`` and the
    arrays ``analytic`` and ``numeric``.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    scale = max(abs(loss.item()), 1.0)
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = np.arange(total) if total <= n_samples else np.sort(rng.choice(total, n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    analytic, numeric = [], []
    with no_grad():
        for k in flat:
            which = int(np.searchsorted(offsets, k, side="right") - 1)
            p = params[which]
            idx = np.unravel_index(int(k - offsets[which]), p.data.shape)
            original = p.data[idx]
            p.data[idx] = original + h
            up = loss_fn().item()
            p.data[idx] = original - h
            down = loss_fn().item()
            p.data[idx] = original
            numeric.append((up - down) / (2 * h))
            analytic.append(grads[which][idx])
    analytic, numeric = np.array(analytic), np.array(numeric)
    floor = max(1e-7, RESOLUTION_UNITS * np.finfo(np.float64).eps * scale / h)
    err = relative_error(analytic, numeric, floor)
    return {
        "max_rel_error": float(err.max()) if len(err) else 0.0,
        "n_checked": len(flat),
        "floor": floor,
        "analytic": analytic,
        "numeric": numeric,
    }
