"""Elementwise activations with their derivatives.

Each entry maps a name to ``(f, df)`` where ``df`` takes the pre-activation
input and the already-computed output, so sigmoid/tanh/ELU can reuse it.
"""

import numpy as np

LEAKY_SLOPE = 0.01
ELU_ALPHA = 1.0


def _linear(z):
    return z


def _linear_grad(z, a):
    return np.ones_like(z)


def _relu(z):
    return np.maximum(z, 0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _leaky_relu(z):
    return np.where(z > 0, z, LEAKY_SLOPE * z)


def _leaky_relu_grad(z, a):
    return np.where(z > 0, 1.0, LEAKY_SLOPE).astype(z.dtype)


def _elu(z):
    # expm1 on the clipped branch avoids overflow warnings for large positive z
    return np.where(z > 0, z, ELU_ALPHA * np.expm1(np.minimum(z, 0)))


def _elu_grad(z, a):
    return np.where(z > 0, 1.0, a + ELU_ALPHA).astype(z.dtype)


def sigmoid(z):
    # tanh form is overflow-free and a single ufunc pass
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def _sigmoid_grad(z, a):
    return a * (1 - a)


def _tanh_grad(z, a):
    return 1 - a * a


ACTIVATIONS = {
    "linear": (_linear, _linear_grad),
    "relu": (_relu, _relu_grad),
    "leaky-relu": (_leaky_relu, _leaky_relu_grad),
    "elu": (_elu, _elu_grad),
    "sigmoid": (sigmoid, _sigmoid_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def get(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(
            f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}"
        ) from None
