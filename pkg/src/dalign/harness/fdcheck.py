"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..tensor import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    worst_input: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    max_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``fn`` must rebuild the scalar output from the current contents of
    ``inputs`` (float64 tensors with ``requires_grad``). When
    ``max_per_input`` is set only that many randomly chosen entries of each
    input are perturbed.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("finite-difference checks need float64 tensors")
        t.grad = None
    out = fn()
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = rng or np.random.default_rng(0)
    worst, worst_i, count = 0.0, -1, 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idx = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
        numeric = np.empty(len(idx))
        with no_grad():
            for n, k in enumerate(idx):
                orig = flat[k]
                flat[k] = orig + h
                fp = float(fn().data)
                flat[k] = orig - h
                fm = float(fn().data)
                flat[k] = orig
                numeric[n] = (fp - fm) / (2 * h)
        err = relative_error(analytic[i].reshape(-1)[idx], numeric)
        count += len(idx)
        if err > worst:
            worst, worst_i = err, i
    return GradCheckResult(worst, count, worst_i)
