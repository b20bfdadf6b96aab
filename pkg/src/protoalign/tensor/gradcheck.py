"""Central finite-difference gradient verification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from protoalign.errors import GradCheckError
from protoalign.tensor.core import Tensor, no_grad

STEP = 1e-5
FLOOR = 1e-8


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_leaf: str | None
    worst_index: tuple | None
    n_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def numeric_grad(fn, leaf: Tensor, name: str = "leaf", step: float = STEP) -> np.ndarray:
    out = np.zeros_like(leaf.data)
    base = leaf.data
    for idx in np.ndindex(*base.shape):
        orig = base[idx]
        with no_grad():
            base[idx] = orig + step
            plus = float(fn().data)
            base[idx] = orig - step
            minus = float(fn().data)
        base[idx] = orig
        est = (plus - minus) / (2.0 * step)
        if not np.isfinite(est):
            raise GradCheckError(name, idx)
        out[idx] = est
    return out


def grad_check(build, leaves: dict, tolerance: float = 1e-4, scales: dict | None = None,
               step: float = STEP, numeric_build=None) -> GradCheckResult:
    """Compare backprop against central differences for every leaf coordinate.

    ``build`` is a zero-argument callable returning a scalar Tensor computed
    from the tensors in ``leaves`` (name -> Tensor). ``scales`` optionally
    maps a leaf name to the factor the analytic gradient is expected to carry
    relative to the true derivative (``-s`` behind a gradient reversal of
    scale ``s``); the analytic value is divided by it before comparing.
    ``numeric_build`` replaces ``build`` for the finite differences when the
    backward pass is expected to match a different objective (a composite
    whose reversed branch is sign-flipped for upstream leaves).
    """
    scales = scales or {}
    for t in leaves.values():
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    root = build()
    root.backward()
    analytic = {name: t.grad.copy() / scales.get(name, 1.0) for name, t in leaves.items()}

    worst, worst_leaf, worst_idx, n = 0.0, None, None, 0
    for name, t in leaves.items():
        num = numeric_grad(numeric_build or build, t, name, step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), FLOOR)
        rel = np.abs(a - num) / denom
        n += rel.size
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            worst_leaf = name
            worst_idx = np.unravel_index(int(rel.argmax()), rel.shape)
    return GradCheckResult(worst, worst_leaf, worst_idx, n, tolerance)
