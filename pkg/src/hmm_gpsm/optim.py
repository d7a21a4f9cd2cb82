"""Adam on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamSettings:
    step: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), 0)


def adam_step(state: AdamState, gradient, params, settings: AdamSettings = AdamSettings()):
    """One bias-corrected Adam descent step.

    ``gradient`` is the gradient of the loss being minimized; callers that
    maximize pass the negated gradient.

    Returns:
        (new state, new params)
    """
    g = np.asarray(gradient, dtype=float)
    params = np.asarray(params, dtype=float)
    if g.shape != params.shape or g.shape != state.m.shape:
        raise ValueError(f"shape mismatch: grad {g.shape}, params {params.shape}, state {state.m.shape}")
    t = state.t + 1
    m = settings.beta1 * state.m + (1.0 - settings.beta1) * g
    v = settings.beta2 * state.v + (1.0 - settings.beta2) * g * g
    m_hat = m / (1.0 - settings.beta1 ** t)
    v_hat = v / (1.0 - settings.beta2 ** t)
    new_params = params - settings.step * m_hat / (np.sqrt(v_hat) + settings.eps)
    return AdamState(m, v, t), new_params
