"""AdamW with decoupled weight decay and an EMA shadow of the parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from clicklabel.errors import GradientError
from clicklabel.refiner import RefinerParams


@dataclass
class OptimizerState:
    """Per-tensor first/second moments, step counter, EMA shadow."""

    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0
    ema: RefinerParams | None = None

    @classmethod
    def fresh(cls, params: RefinerParams) -> "OptimizerState":
        state = cls()
        for name, arr in params.tensors():
            state.first[name] = np.zeros_like(arr)
            state.second[name] = np.zeros_like(arr)
        state.ema = params.copy()
        return state


def adamw_step(params: RefinerParams, grads: RefinerParams, state: OptimizerState,
               lr: float, weight_decay: float = 0.0, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               ema_decay: float = 0.999) -> tuple[RefinerParams, OptimizerState]:
    """One bias-corrected AdamW update followed by the EMA update.

    Weight decay is decoupled: params shrink by ``lr * weight_decay``
    independently of the gradient. Non-finite gradients reject the step.
    Returns new parameter and state snapshots; inputs are not mutated.
    """
    for name, g in grads.tensors():
        if not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient in {name}; step rejected")

    t = state.step + 1
    new_params = {}
    new_state = OptimizerState(step=t)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    grad_map = dict(grads.tensors())
    for name, p in params.tensors():
        g = grad_map[name]
        m = beta1 * state.first[name] + (1.0 - beta1) * g
        v = beta2 * state.second[name] + (1.0 - beta2) * g * g
        new_state.first[name] = m
        new_state.second[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = p * (1.0 - lr * weight_decay) - lr * m_hat / (
            np.sqrt(v_hat) + eps
        )
    updated = RefinerParams(variant=params.variant, **new_params)
    shadow = {}
    for name, s in state.ema.tensors():
        shadow[name] = ema_decay * s + (1.0 - ema_decay) * new_params[name]
    new_state.ema = RefinerParams(variant=params.variant, **shadow)
    return updated, new_state
