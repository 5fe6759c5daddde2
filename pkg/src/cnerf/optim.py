"""Adam with bias correction over named Parameters.

Moments are keyed by parameter name so a step may cover any subset of the
model (per-instance code rows participate only when their instance is
sampled; edit jobs touch only the selected subnetworks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import MissingGradientError, Parameter


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params) -> None:
    """One Adam update over the trainable params in ``params``.

    Non-trainable parameters are skipped untouched; a trainable parameter
    without a gradient is an error (the caller forgot backward or passed the
    wrong subset).
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if not isinstance(p, Parameter):
            raise TypeError(f"adam_step expects Parameters, got {type(p).__name__}")
        if not p.trainable:
            continue
        if p.grad is None:
            raise MissingGradientError(f"parameter {p.name!r} has no gradient")
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[p.name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[p.name] = m
        state.v[p.name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
