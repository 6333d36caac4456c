"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .errors import VerificationError
from .rng import SplitMix64
from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from dominating."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-5,
    max_elements: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph on every call and return a scalar.
    Params with ``requires_grad=False`` are skipped. Every param must be
    float64. ``max_elements`` caps the number of entries probed per tensor
    (chosen with a seeded generator); ``None`` probes them all.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.dtype != np.float64:
            raise VerificationError(f"grad_check needs float64 params, got {p.dtype}")
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise VerificationError("loss is not finite")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = SplitMix64(seed)
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        positions = range(flat.size)
        if max_elements is not None and flat.size > max_elements:
            positions = rng.sample(list(positions), max_elements)
        numeric = np.empty(len(positions))
        for n, i in enumerate(positions):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + epsilon
                up = loss_fn().item()
                flat[i] = orig - epsilon
                down = loss_fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise VerificationError("loss became non-finite under perturbation")
            numeric[n] = (up - down) / (2 * epsilon)
        a_sel = a.reshape(-1)[list(positions)]
        if numeric.size:
            worst = max(worst, float(relative_error(a_sel, numeric, floor).max()))
    return worst
