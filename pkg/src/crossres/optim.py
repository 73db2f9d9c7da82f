"""Named parameter collections and the Adam optimizer."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


class ParamStore:
    """Ordered map of unique names to parameter tensors.

    Iteration is always lexicographic by name, so optimizer updates,
    serialization, and parameter counts are reproducible run to run.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=trainable)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensors(self) -> list[Tensor]:
        return [self._params[n] for n in self.names()]

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def set_trainable(self, flag: bool) -> None:
        for t in self._params.values():
            t.requires_grad = flag
            t._tracked = flag

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy values in by name; shapes must match exactly."""
        for name, t in self.items():
            if name not in arrays:
                raise KeyError(f"missing array {name!r}")
            src = arrays[name]
            if src.shape != t.data.shape:
                raise ShapeError(
                    f"array {name!r}: stored shape {src.shape} does not match "
                    f"parameter shape {t.data.shape}"
                )
            t.data = src.astype(t.data.dtype, copy=True)

    @staticmethod
    def union(*stores: "ParamStore") -> "ParamStore":
        """A combined view over several stores; tensors are shared, not copied."""
        merged = ParamStore()
        for store in stores:
            for name, t in store.items():
                if name in merged._params:
                    raise ValueError(f"duplicate parameter name {name!r} across stores")
                merged._params[name] = t
        return merged


class AdamState:
    """Adam moment buffers for one parameter collection."""

    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        size = max((p.data.size for p in params.tensors()), default=0)
        dtype = params.tensors()[0].dtype if len(params) else np.float32
        self._scratch = np.empty(size, dtype=dtype)

    def scratch(self, shape, dtype) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        if self._scratch.dtype != dtype or self._scratch.size < n:
            self._scratch = np.empty(max(n, self._scratch.size), dtype=dtype)
        return self._scratch[:n].reshape(shape)


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update; parameter grads are cleared afterwards."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step_scale = state.lr / (1.0 - b1 ** state.t)
    denom_scale = 1.0 / np.sqrt(1.0 - b2 ** state.t)
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        s = state.scratch(p.data.shape, p.data.dtype)
        m *= b1
        np.multiply(g, 1.0 - b1, out=s)
        m += s
        v *= b2
        np.multiply(g, g, out=s)
        s *= 1.0 - b2
        v += s
        np.sqrt(v, out=s)
        s *= denom_scale
        s += state.eps
        np.divide(m, s, out=s)
        s *= step_scale
        p.data -= s
        p.grad = None
