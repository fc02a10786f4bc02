from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ConfigurationError
from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step sees NaN or infinite gradients."""


@dataclass
class OptimConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0 or not 0.0 < self.beta2 < 1.0:
            raise ConfigurationError("Adam betas must lie strictly inside (0, 1)")
        if self.learning_rate < 0.0:
            raise ConfigurationError("learning rate must be non-negative")
        if self.epsilon <= 0.0:
            raise ConfigurationError("epsilon must be positive")
        if self.weight_decay < 0.0:
            raise ConfigurationError("weight decay must be non-negative")


@dataclass
class AdamState:
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: OptimConfig,
              grads: dict[str, np.ndarray] | None = None,
              learning_rate: float | None = None) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``grads`` defaults to each parameter's ``.grad`` (missing grads count as
    zero). ``learning_rate`` overrides ``cfg.learning_rate`` so schedulers
    need not rebuild the config.
    """
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradient in {', '.join(sorted(bad))} "
                                     f"at step {state.step_count + 1}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= lr * update
    return state
