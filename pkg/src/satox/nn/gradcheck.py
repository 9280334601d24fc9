"""Central finite-difference gradients for checking backward passes."""

import numpy as np


def numerical_gradient(f, x, indices=None, step=1e-5):
    """Central difference of scalar ``f()`` w.r.t. entries of array ``x`` (perturbed in place).

    ``indices`` selects flat positions to probe; all entries when omitted.
    Returns an array of the probed partial derivatives.
    """
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out.append((up - down) / (2 * step))
    return np.array(out)


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    return np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)
