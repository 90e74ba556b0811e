"""Adam optimizer over named parameter tensors, plus seeded initialisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import OptimStateError, ParameterError


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Weight matrix drawn uniformly from +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class AdamState:
    """Moment estimates for a fixed set of named parameters."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, learning_rate: float, **kwargs) -> "AdamState":
        if learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {learning_rate}")
        state = cls(learning_rate=learning_rate, **kwargs)
        for name, tensor in params.items():
            state.first_moment[name] = np.zeros_like(tensor.values)
            state.second_moment[name] = np.zeros_like(tensor.values)
        return state


def adam_step(params: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Every parameter in ``state`` must be present in ``params`` with a
    populated gradient; gradients are cleared after the update.
    """
    if set(params.keys()) != set(state.first_moment.keys()):
        raise OptimStateError(
            f"parameter names {sorted(params)} do not match optimizer state "
            f"{sorted(state.first_moment)}"
        )
    for name in state.first_moment:
        tensor = params[name]
        if not isinstance(tensor, Tensor):
            raise OptimStateError(f"parameter {name!r} is not a Tensor")
        if tensor.grad is None:
            raise OptimStateError(f"parameter {name!r} has no gradient")
        if tensor.grad.shape != state.first_moment[name].shape:
            raise OptimStateError(
                f"parameter {name!r}: gradient shape {tensor.grad.shape} does not "
                f"match state shape {state.first_moment[name].shape}"
            )

    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name in state.first_moment:
        tensor = params[name]
        g = tensor.grad
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        tensor.values -= state.learning_rate * update
        tensor.grad = None
