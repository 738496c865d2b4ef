"""Momentum SGD over a flat name -> array parameter dict."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class OptState:
    learning_rate: float
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptState,
             names=None) -> None:
    """In-place update ``v <- mu*v - lr*g; p <- p + v`` for ``names`` (default: all grads).

    All gradients are validated before any parameter is touched.
    """
    names = list(grads) if names is None else list(names)
    for name in names:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    for name in names:
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(params[name])
        v = opt.momentum * v - opt.learning_rate * grads[name]
        opt.velocity[name] = v
        params[name] = params[name] + v
