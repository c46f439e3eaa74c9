"""Central finite-difference gradient checks.

The relative error of a tensor is ``max|analytic - numeric| / max(max|analytic|,
max|numeric|, floor)``: the worst absolute discrepancy measured against the
tensor's own gradient scale. Entries whose true gradient is tiny therefore do
not inflate the error. Gradients that vanish by construction (key biases under
softmax) leave only central-difference round-off, which scales with the loss
rather than with the tensor. ``gradcheck`` therefore floors each tensor's
scale at ``rel_floor`` times the largest gradient of any checked input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, gradients, no_grad


@dataclass(frozen=True)
class GradResult:
    name: str
    rel_err: float
    checked: int
    scale: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def numerical_grad(
    f: Callable[[], Tensor], t: Tensor, eps: float = 1e-5, indices: Optional[Sequence[tuple]] = None
) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t`` (all entries by default)."""
    if not t.data.flags.c_contiguous:
        t.data = np.ascontiguousarray(t.data)
    flat = t.data.reshape(-1)  # a view, so writes reach f()
    if indices is None:
        idx = range(flat.size)
    else:
        idx = [np.ravel_multi_index(i, t.shape) for i in indices]
    out = np.zeros(len(idx))
    with no_grad():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            out[n] = (up - down) / (2 * eps)
    return out


def gradcheck(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    names: Optional[Sequence[str]] = None,
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    rel_floor: float = 1e-3,
) -> list[GradResult]:
    """Compare autodiff gradients of scalar ``f()`` with central finite differences.

    With ``max_entries`` each tensor is probed at that many random positions,
    always including the position of its largest analytic gradient.
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    analytic = [g.copy() for g in gradients(f(), inputs)]
    overall = max((float(np.max(np.abs(a), initial=0.0)) for a in analytic), default=0.0)
    floor = max(1e-6, rel_floor * overall)
    rng = np.random.default_rng(seed)
    results = []
    for name, t, a in zip(names, inputs, analytic):
        if max_entries is None or t.size <= max_entries:
            indices = None
            a_sel = a.reshape(-1)
        else:
            picks = set(rng.choice(t.size, size=max_entries - 1, replace=False).tolist())
            picks.add(int(np.argmax(np.abs(a))))
            flat_idx = sorted(picks)
            indices = [np.unravel_index(i, t.shape) for i in flat_idx]
            a_sel = a.reshape(-1)[flat_idx]
        num = numerical_grad(f, t, eps, indices)
        results.append(GradResult(name, relative_error(a_sel, num, floor), len(num), float(np.max(np.abs(a_sel), initial=0.0))))
    return results
