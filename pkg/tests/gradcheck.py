"""Central finite-difference oracle used by the gradient tests.

Kept independent of the autodiff engine: it only calls forward functions on
plain numpy arrays and never inspects the graph it is checking.
"""

import numpy as np


def numerical_grad(f, arrays, which, h=1e-5):
    """d f / d arrays[which] by central differences; f takes the arrays and
    returns a python float."""
    work = [a.copy() for a in arrays]
    target = work[which]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + h
        fp = f(*work)
        target[idx] = orig - h
        fm = f(*work)
        target[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(analytic, numeric):
    """Max elementwise error normalized by the numeric gradient scale."""
    numeric = np.asarray(numeric)
    scale = max(np.abs(numeric).max(), 1e-12)
    return float(np.abs(np.asarray(analytic) - numeric).max() / scale)
