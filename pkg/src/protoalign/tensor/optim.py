"""Named parameter storage and the Adam optimiser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from protoalign.errors import MissingGradError
from protoalign.tensor.core import Tensor


class ParameterStore:
    """Ordered mapping from a dotted parameter path to a trainable leaf."""

    def __init__(self, arrays: dict | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def merged(self, *others: "ParameterStore") -> "ParameterStore":
        """A store sharing (not copying) the tensors of ``self`` and ``others``."""
        out = ParameterStore()
        for store in (self, *others):
            for name, t in store.items():
                if name in out._params:
                    raise KeyError(f"duplicate parameter name {name!r}")
                out._params[name] = t
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = sorted(set(self._params) - set(arrays))
            extra = sorted(set(arrays) - set(self._params))
            raise KeyError(f"restore mismatch: missing={missing} unexpected={extra}")
        for name, value in arrays.items():
            t = self._params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{name}: shape {value.shape} != {t.shape}")
            t.data = value.copy()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place, then zero the grads."""
    for name, t in params.items():
        if t.grad is None:
            raise MissingGradError(name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.data = t.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = np.zeros_like(t.data)
