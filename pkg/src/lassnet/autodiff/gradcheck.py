"""Central finite-difference checks for the tape."""

from __future__ import annotations

import numpy as np

from .tensor import Tape


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. each array (perturbed in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(build, tensors, h=1e-5, probe=None, seed=7919, joint=False):
    """Compare tape gradients of ``build()`` against finite differences.

    ``build`` returns an output Tensor. It is reduced to a scalar through a
    fixed random projection so every output element contributes. Returns
    the worst relative error over ``tensors``; with ``joint=True`` all
    gradients are scaled together instead, so tensors whose true gradient is
    structurally zero (e.g. a bias feeding batch norm) do not divide noise by
    noise.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = build()
    if probe is None:
        probe = rng.standard_normal(out.shape)
    from . import ops

    with tape:
        loss = ops.sum(ops.mul(out, probe))
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in tensors]

    def f():
        return float(np.sum(build().data * probe))

    numeric = numeric_grad(f, [t.data for t in tensors], h=h)
    if joint:
        flat = lambda gs: np.concatenate([np.ravel(g) for g in gs])  # noqa: E731
        return relative_error(flat(analytic), flat(numeric))
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
