"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .optim import ParamStore
from .tensor import Tape, Tensor


def to_float64(params: ParamStore) -> ParamStore:
    """A float64 copy of a parameter store (gradient checks run in 64-bit)."""
    out = ParamStore()
    for name, p in params.items():
        out.add(name, p.data.astype(np.float64), trainable=p.requires_grad)
    return out


def grad_check(f: Callable[[ParamStore], Tensor], point: ParamStore,
               h: float = 1e-3, samples: int = 20, seed: int = 0) -> float:
    """Max relative error between backward grads and central differences.

    ``f`` maps the parameter store to a scalar tensor. The check promotes the
    point to float64, takes one analytic backward pass, then perturbs up to
    ``samples`` randomly chosen coordinates by +/- h and compares.
    """
    point64 = to_float64(point)
    with Tape() as tape:
        y = f(point64)
        if not np.isfinite(y.data).all():
            raise FloatingPointError("grad_check: function value is not finite")
        tape.backward(y)
    grads = {}
    for name, p in point64.items():
        if p.grad is None:
            grads[name] = np.zeros_like(p.data)
        else:
            grads[name] = p.grad.copy()
        p.grad = None

    names = point64.names()
    sizes = [point64[n].data.size for n in names]
    total = int(np.sum(sizes))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    for flat_idx in sorted(int(i) for i in chosen):
        which = int(np.searchsorted(offsets, flat_idx, side="right")) - 1
        name = names[which]
        local = flat_idx - offsets[which]
        p = point64[name]
        flat = p.data.reshape(-1)
        orig = flat[local]

        flat[local] = orig + h
        y_plus = float(f(point64).data)
        flat[local] = orig - h
        y_minus = float(f(point64).data)
        flat[local] = orig
        if not (np.isfinite(y_plus) and np.isfinite(y_minus)):
            raise FloatingPointError("grad_check: perturbed function value is not finite")

        numeric = (y_plus - y_minus) / (2.0 * h)
        analytic = float(grads[name].reshape(-1)[local])
        err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
