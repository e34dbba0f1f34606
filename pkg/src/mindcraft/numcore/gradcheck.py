"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from . import no_grad


def numeric_grad(f, x: np.ndarray, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f())
        flat[i] = old - h
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(loss_fn, tensors, h=1e-5):
    """Compare backprop against finite differences for every tensor in ``tensors``.

    ``loss_fn`` builds a fresh scalar Tensor from the current tensor values.
    Returns {name: relative error}.
    """
    if isinstance(tensors, dict):
        items = list(tensors.items())
    else:
        items = [(getattr(t, "name", None) or str(i), t) for i, t in enumerate(tensors)]
    for _, t in items:
        t.grad = None
    loss_fn().backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in items}

    def f():
        with no_grad():
            return loss_fn().data

    return {name: rel_error(analytic[name], numeric_grad(f, t.data, h)) for name, t in items}
