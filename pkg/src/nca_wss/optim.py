"""Adam with bias correction and a per-step exponential learning-rate decay."""

from dataclasses import dataclass

import numpy as np

from .model import NcaParams


@dataclass
class AdamState:
    step: int  # optimiser steps taken so far
    m: NcaParams
    v: NcaParams


def init_adam(params):
    return AdamState(step=0, m=params.zeros_like(), v=params.zeros_like())


def effective_lr(config, global_step):
    return config.learning_rate * config.lr_decay**global_step


def adam_step(params, grads, state, config, global_step=None):
    """Return ``(new_params, new_state)``; inputs are left untouched.

    ``global_step`` (defaults to ``state.step``) sets the decayed rate
    ``learning_rate * lr_decay**global_step``.
    """
    if global_step is None:
        global_step = state.step
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_epsilon
    t = state.step + 1
    lr = effective_lr(config, global_step)
    new_p, new_m, new_v = {}, {}, {}
    for name in NcaParams.names():
        p, g = getattr(params, name), getattr(grads, name)
        if p.shape != g.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * getattr(state.m, name) + (1.0 - b1) * g
        v = b2 * getattr(state.v, name) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return NcaParams(**new_p), AdamState(step=t, m=NcaParams(**new_m), v=NcaParams(**new_v))
