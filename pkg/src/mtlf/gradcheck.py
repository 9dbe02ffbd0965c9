"""Finite-difference verification of backward passes.

Central differences with per-element step h*max(1, |x_i|), compared
against the analytic gradient from one backward pass.  Run in 64-bit
mode (float64 tensors); float32 rounding drowns the signal.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, no_grad


def grad_check(
    f: Callable,
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``f`` maps ``x`` (one tensor or a sequence of tensors, all
    requires_grad) to a scalar Tensor and must be deterministic across
    calls.  ``max_elements`` caps the probed coordinates per tensor (seeded
    subsample via ``rng``); by default every coordinate is probed.

    Relative error per element: |a - n| / max(1, |a|, |n|).
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.grad = None
    loss = f(x)
    loss.backward()
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            if rng is None:
                rng = np.random.default_rng(0)
            indices = rng.choice(flat.size, size=max_elements, replace=False)
        for i in indices:
            orig = flat[i]
            step = h * max(1.0, abs(float(orig)))
            with no_grad():
                flat[i] = orig + step
                up = f(x).item()
                flat[i] = orig - step
                down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(ana_flat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
