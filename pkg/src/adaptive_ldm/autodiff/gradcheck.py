"""Finite-difference gradient checking.

The analytic side runs the graph in the dtype of the supplied inputs. The
numeric side always evaluates the function in float64 with central
differences, so an f32 check measures the f32 adjoints against an accurate
reference instead of against f32 rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, run_backward


@dataclass
class GradcheckResult:
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||, 1e-8) over one checked tensor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    seed: int = 0,
    eps: float = 1e-5,
    max_entries: int | None = None,
) -> GradcheckResult:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` maps the input tensors to a tensor of any shape; it is scalarized
    with a fixed random cotangent drawn from ``seed``. Only inputs with
    ``requires_grad`` are checked. ``max_entries`` caps the number of
    coordinates probed per input (chosen at random from the same seed).
    """
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    cot = rng.standard_normal(out.shape)
    run_backward(out, cot.astype(out.dtype))
    analytic = [None if not t.requires_grad else (t.grad if t.grad is not None else np.zeros_like(t.data))
                for t in inputs]

    originals = [t.data for t in inputs]
    wide = [t.data.astype(np.float64) for t in inputs]

    def scalar() -> float:
        with no_grad():
            value = fn(*inputs).data
        return float(np.sum(value.astype(np.float64) * cot))

    errors = []
    try:
        # inputs may be parameters captured by ``fn``; swap their storage in place
        for t, w in zip(inputs, wide):
            t.data = w
        for i, t in enumerate(inputs):
            if not t.requires_grad:
                continue
            flat = wide[i].reshape(-1)
            coords = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            numeric = np.empty(coords.size)
            for j, c in enumerate(coords):
                keep = flat[c]
                flat[c] = keep + eps
                up = scalar()
                flat[c] = keep - eps
                down = scalar()
                flat[c] = keep
                numeric[j] = (up - down) / (2 * eps)
            errors.append(relative_error(analytic[i].reshape(-1)[coords], numeric))
    finally:
        for t, orig in zip(inputs, originals):
            t.data = orig
    return GradcheckResult(max(errors) if errors else 0.0, errors)
