from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from msglab.nnets.params import Params, zeros_like


@dataclass(frozen=True, eq=False)
class AdamState:
    m: Params
    v: Params
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Params, lr: float = 1e-4, **kwargs) -> AdamState:
    return AdamState(m=zeros_like(params), v=zeros_like(params), lr=lr, **kwargs)


def adam_update(state: AdamState, params: Params, grads: Params) -> tuple[AdamState, Params]:
    """One bias-corrected Adam step. Inputs are not modified."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    m, v, new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new[k] = p - state.lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return replace(state, m=m, v=v, step=step), new
