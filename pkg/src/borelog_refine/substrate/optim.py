"""Adam optimizer over a ParameterStore."""

from __future__ import annotations

import numpy as np

from .params import ParameterStore
from .tensor import DTYPE, SubstrateError


class OptimizerState:
    """Per-parameter first/second moment accumulators plus the step counter."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}


def adam_step(store: ParameterStore, grads: dict, state: OptimizerState) -> None:
    """Standard Adam update, in place; increments the step counter."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in store.items():
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != t.data.shape:
            raise SubstrateError(
                f"{name}: gradient shape {g.shape} vs parameter {t.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
