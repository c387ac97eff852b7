"""Central finite-difference oracles used to validate analytic derivatives."""

import numpy as np


def central_diff(f, x, step=None):
    """Gradient of scalar- or vector-valued f at x by central differences.

    Returns an array of shape f(x).shape + x.shape. The step is tuned per
    component: cube-root of machine eps times the component scale, unless an
    explicit scalar or per-component step is given.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    if step is None:
        step = 6e-6 * np.maximum(np.abs(x), 1.0)
    h = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    grad = np.empty(f0.shape + x.shape)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h[idx]
        xm[idx] -= h[idx]
        grad[(...,) + idx] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h[idx])
    return grad


def rel_err(a, b, floor=None):
    """Componentwise relative error, floored so near-zero reference components
    are judged on the overall scale of b rather than on themselves."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if floor is None:
        floor = 1e-6 * max(1.0, float(np.max(np.abs(b), initial=0.0)))
    scale = np.maximum(np.abs(b), floor)
    return float(np.max(np.abs(a - b) / scale))
