"""AdamW: bias-corrected Adam with decoupled weight decay.

Decay is applied directly to the parameters (not folded into the
gradient), so a zero-gradient step with nonzero decay still shrinks the
weights while leaving the moment estimates untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import OptimizerError, ParameterError


@dataclass
class AdamWState:
    """Moment estimates and hyperparameters for one registered parameter set."""

    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ParameterError("learning_rate must be non-negative")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ParameterError("betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ParameterError("epsilon must be positive, weight_decay non-negative")

    def register(self, params: dict[str, Tensor]) -> None:
        self.first_moment = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.second_moment = {n: np.zeros_like(p.data) for n, p in params.items()}


def adamw_step(state: AdamWState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """One in-place AdamW update over ``params``.

    Raises OptimizerError naming the first parameter whose gradient is
    missing or whose moment buffers are absent.
    """
    for name in params:
        if name not in state.first_moment:
            raise OptimizerError(f"parameter '{name}' not registered with optimizer")
        if grads.get(name) is None:
            raise OptimizerError(f"missing gradient for parameter '{name}'")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, param in params.items():
        g = grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        param.data -= (state.learning_rate * update).astype(param.data.dtype)
        if state.weight_decay:
            param.data -= (state.learning_rate * state.weight_decay) * param.data


class AdamW:
    """Optimizer over a named parameter set, driving :func:`adamw_step`.

    ``max_grad_norm`` optionally clips the global gradient norm before the
    update; it defaults to off.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        learning_rate: float = 5e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
        weight_decay: float = 0.01,
        max_grad_norm: float | None = None,
    ):
        self.params = dict(params)
        self.state = AdamWState(
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            weight_decay=weight_decay,
        )
        self.state.register(self.params)
        self.max_grad_norm = max_grad_norm

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                raise OptimizerError(f"missing gradient for parameter '{name}'")
            grads[name] = p.grad
        if self.max_grad_norm is not None:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / (norm + 1e-12)
                grads = {n: g * scale for n, g in grads.items()}
        adamw_step(self.state, self.params, grads)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
