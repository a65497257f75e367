"""Finite-difference verification of tape gradients.

``grad_check`` compares the adjoints produced by ``backward`` against
central differences. Large tensors are checked on a seeded random
subset of coordinates so whole-model checks stay fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class TensorCheck:
    name: str
    max_rel_err: float
    checked: int


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_tensor: list[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def _relative_error(analytic: float, numeric: float) -> float:
    # absolute comparison for small gradients, relative for large ones
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor] | dict[str, Tensor],
    tol: float = 1e-4,
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Check d f() / d input against central differences (step 1e-5).

    ``f`` must be a deterministic scalar-valued closure over ``inputs``.
    When ``max_coords`` is set, at most that many coordinates per tensor
    are probed (seeded subset); otherwise every coordinate is probed.
    """
    if isinstance(inputs, dict):
        named = list(inputs.items())
    else:
        named = [(f"input{i}", t) for i, t in enumerate(inputs)]
    rng = rng or np.random.default_rng(0)

    for _, t in named:
        t.grad = None
        t.requires_grad = True
    loss = f()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in named}

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for name, t in named:
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            with no_grad():
                up = f().item()
            flat[c] = orig - step
            with no_grad():
                down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, _relative_error(analytic[name].reshape(-1)[c], numeric))
        report.per_tensor.append(TensorCheck(name, worst, len(coords)))
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
