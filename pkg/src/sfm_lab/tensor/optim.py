"""Named parameter stores, the Adam update and EMA weight tracking."""

from __future__ import annotations

import numpy as np

from .engine import Tensor, UsageError, parameter

__all__ = ["ParamStore", "adam_step", "ema_update", "grad_norm"]


class ParamStore:
    """Ordered name -> parameter map plus Adam moment state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name: {name}")
        tensor = parameter(values, dtype=np.asarray(values).dtype)
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.values)
        self._v[name] = np.zeros_like(tensor.values)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def n_values(self) -> int:
        return sum(t.values.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        """Parameters never reached by the trace get an explicit zero grad."""
        for t in self._params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.values)

    def copy(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.values.astype(dtype or t.values.dtype))
        out.step_count = self.step_count
        return out

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in values:
                raise UsageError(f"missing parameter in payload: {name}")
            arr = np.asarray(values[name], dtype=t.values.dtype)
            if arr.shape != t.values.shape:
                raise UsageError(f"shape mismatch for {name}: {arr.shape} != {t.values.shape}")
            t.values = arr.copy()


def grad_norm(*stores: ParamStore) -> float:
    total = 0.0
    for store in stores:
        for t in store.items():
            if t[1].grad is not None:
                total += float(np.sum(np.asarray(t[1].grad, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam on every parameter; clears grads afterwards."""
    for name, t in store.items():
        if t.grad is None:
            raise UsageError(f"adam_step before backward: parameter {name} has no grad")
    store.step_count += 1
    t_step = store.step_count
    c1 = 1.0 - beta1**t_step
    c2 = 1.0 - beta2**t_step
    for name, t in store.items():
        g = t.grad
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        t.values = t.values - t.values.dtype.type(lr) * update.astype(t.values.dtype)
    store.zero_grads()


def ema_update(ema_store: ParamStore, store: ParamStore, rate: float) -> None:
    """ema <- rate * ema + (1 - rate) * params, elementwise."""
    if ema_store.names() != store.names():
        raise UsageError("EMA and live parameter names differ")
    for name, live in store.items():
        ema = ema_store[name]
        if ema.values.shape != live.values.shape:
            raise UsageError(f"EMA shape mismatch for {name}")
        ema.values = rate * ema.values + (1.0 - rate) * live.values
