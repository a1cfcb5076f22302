"""Adam optimizer over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import AutodiffError, Tensor


@dataclass
class AdamState:
    """Moment buffers and hyperparameters for one parameter set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update; zeroes all gradients afterwards.

    Every parameter must carry a populated gradient. Moment buffers are
    created lazily on the first step and always match parameter shapes.
    """
    for name, p in params.items():
        if p.grad is None:
            raise AutodiffError(f"adam_step: parameter {name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise AutodiffError(
                f"adam_step: gradient shape {p.grad.shape} does not match "
                f"parameter {name!r} shape {p.data.shape}"
            )

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.v[name] = v
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
    return state


class Adam:
    """Convenience wrapper pairing a parameter dict with its AdamState."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(self.params, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
