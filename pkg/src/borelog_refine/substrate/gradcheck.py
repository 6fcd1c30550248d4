"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .params import ParameterStore
from .tensor import SubstrateError


def gradient_check(loss_fn, store: ParameterStore, rel_tol: float = 1e-4,
                   step: float = 1e-6, max_entries: int = 24,
                   seed: int = 0) -> dict:
    """Compare tape gradients against central differences.

    loss_fn: nullary callable returning a scalar Tensor built from `store`.
    Checks up to `max_entries` deterministically chosen entries per
    parameter tensor and reports the max relative error for each.
    Returns {"passed": bool, "per_param": {name: max_rel_err}}.
    """
    store.zero_grad()
    loss = loss_fn()
    if loss.size != 1:
        raise SubstrateError("gradient_check expects a scalar loss")
    loss.backward()
    analytic = store.gradients()

    report: dict[str, float] = {}
    for name, t in store.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if n <= max_entries:
            idx = np.arange(n)
        else:
            rng = np.random.Generator(np.random.PCG64(seed))
            idx = rng.choice(n, size=max_entries, replace=False)
            idx.sort()
        worst = 0.0
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn().data)
            flat[i] = orig - step
            lm = float(loss_fn().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            denom = max(abs(fd), abs(ga[i]), 1e-6)
            worst = max(worst, abs(fd - ga[i]) / denom)
        report[name] = worst
    store.zero_grad()
    return {
        "passed": all(v <= rel_tol for v in report.values()),
        "rel_tol": rel_tol,
        "per_param": report,
    }
