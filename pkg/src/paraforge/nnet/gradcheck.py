"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np


def max_relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both are identically zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x``, perturbed in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        plus = f()
        flat[i] = old - h
        minus = f()
        flat[i] = old
        g[i] = (plus - minus) / (2 * h)
    return grad


def check_layer(layer, x: np.ndarray, h: float = 1e-5, seed: int = 0) -> dict:
    """Compare ``layer.backward`` to finite differences of ``sum(out * R)``.

    Returns ``{"input": err, "<param name>": err, ...}``. The layer and ``x``
    must already be in float64.
    """
    rng = np.random.default_rng(seed)
    out = layer(x)
    proj = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(layer.forward(x) * proj))

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(proj)
    errors = {"input": max_relative_error(dx, numeric_gradient(loss, x, h))}
    for name, p in layer.named_parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        errors[name] = max_relative_error(analytic, numeric_gradient(loss, p.data, h))
    return errors
