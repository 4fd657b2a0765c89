"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from .autodiff import AutodiffError, Parameter


class AdamState:
    """Per-parameter moment accumulators plus the shared step count."""

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise AutodiffError("duplicate parameter names in optimizer")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}


def adam_step(state: AdamState):
    """Apply one Adam update to all parameters, then clear gradients.

    Parameters whose gradient was never populated (no path to the loss)
    are an error: silent no-ops hide wiring bugs.
    """
    for p in state.params:
        if p.grad is None:
            raise AutodiffError(f"adam_step: parameter {p.name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for p in state.params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        p.grad = None


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def clear_grads(params):
    for p in params:
        p.grad = None
