"""Finite-difference gradient verification harness.

Analytic gradients from the tape are compared against central differences
computed in float64. The probe loss is ``sum(op(inputs) * r)`` with a fixed
random ``r`` so that every output element contributes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, mul, sum_


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued ``f`` with respect to ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def gradient_check(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    h: float = 1e-5,
    tol: float = 1e-4,
    **op_kwargs,
) -> float:
    """Run one analytic-vs-numeric comparison; returns the worst relative error.

    Relative error per element is |analytic - numeric| / max(1, |analytic|,
    |numeric|). Raises AssertionError when the worst error reaches ``tol``.
    """
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe_shape = op(*[Tensor(x) for x in inputs], **op_kwargs).data.shape
    r = rng.standard_normal(probe_shape)

    loss = sum_(mul(op(*tensors, **op_kwargs), Tensor(r)))
    backward(loss)

    worst = 0.0
    for t, x in zip(tensors, inputs):
        def f(t=t):
            out = op(*[Tensor(u.data) for u in tensors], **op_kwargs)
            return float((out.data * r).sum())

        numeric = finite_difference_grad(f, t.data, h=h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        err = float(np.max(np.abs(analytic - numeric) / denom))
        worst = max(worst, err)
        if err >= tol:
            raise AssertionError(
                f"gradient check failed for {getattr(op, '__name__', op)}: "
                f"relative error {err:.3e} >= {tol:.1e}"
            )
    return worst
