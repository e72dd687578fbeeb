"""Central finite-difference checks of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


class GradCheckError(ArithmeticError):
    pass


def _scalarize(out: Tensor, proj: np.ndarray) -> Tensor:
    from . import ops
    return ops.sum(ops.mul(out, proj))


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float | None = None,
               step: float = 1e-6, seed: int = 0, floor: float = 1e-5,
               max_elements: int | None = None) -> float:
    """Compare backprop gradients of ``fn(*inputs)`` with central differences.

    The output is reduced to a scalar through a fixed random projection so every
    output element contributes. The per-element error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; the maximum over
    all checked input elements is returned. With ``tolerance`` set, exceeding it
    raises ``GradCheckError``. ``max_elements`` caps the probes per input (evenly
    strided) for large parameter sets.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = rng.uniform(0.5, 1.5, size=out.shape)
    for t in inputs:
        t.grad = None
    _scalarize(out, proj).backward()

    worst = 0.0
    for k, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        bad = np.flatnonzero(~np.isfinite(analytic))
        if bad.size:
            raise GradCheckError(f"non-finite gradient for input {k} at element {int(bad[0])}")
        flat = t.data.reshape(-1)
        probes = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            probes = np.linspace(0, flat.size - 1, max_elements).round().astype(int)
        for i in probes:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                hi = flat[i]
                out_plus = fn(*inputs).data
                flat[i] = orig - step
                lo = flat[i]
                out_minus = fn(*inputs).data
            flat[i] = orig
            # difference before reducing: avoids cancellation in two large sums
            # divide by the step actually realised in floating point
            numeric = float(np.sum((out_plus - out_minus) * proj)) / (hi - lo)
            a = analytic.reshape(-1)[i]
            if not np.isfinite(numeric):
                raise GradCheckError(f"non-finite numeric gradient for input {k} at element {int(i)}")
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    if tolerance is not None and worst > tolerance:
        raise GradCheckError(f"max relative error {worst:.3e} exceeds {tolerance:.1e}")
    return worst
