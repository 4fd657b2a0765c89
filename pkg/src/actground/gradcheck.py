"""Finite-difference gradient checking.

Central differences on 64-bit inputs; used by the test suite and the
`verify` CLI subcommand.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .optim import clear_grads


def numerical_grad(fn, tensors, index, eps=1e-6):
    """Central-difference gradient of scalar fn() w.r.t. tensors[index].data."""
    t = tensors[index]
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_gradients(fn, tensors, eps=1e-6, rtol=1e-4, atol=1e-7):
    """Compare analytic and numerical gradients of scalar fn(tensors).

    Returns the worst relative error seen; raises AssertionError on
    disagreement beyond rtol (with atol floor for near-zero entries).
    """
    clear_grads(tensors)
    loss = fn()
    loss.backward()
    worst = 0.0
    for idx, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, tensors, idx, eps=eps)
        denom = np.maximum(np.abs(numeric), np.abs(analytic))
        err = np.abs(analytic - numeric)
        rel = err / np.maximum(denom, atol / rtol)
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
        if not np.all(err <= atol + rtol * denom):
            bad = np.unravel_index(np.argmax(rel), rel.shape) if rel.ndim else ()
            raise AssertionError(
                f"gradient mismatch on tensor {idx} at {bad}: "
                f"analytic={analytic[bad]}, numeric={numeric[bad]}, "
                f"rel={rel[bad] if rel.ndim else rel}")
    clear_grads(tensors)
    return worst
