"""Layer implementations with hand-written backward passes.

All layers take batch-leading arrays; ``input_shape`` and ``output_shape``
exclude the batch axis. Spatial tensors are channels-last ``(N, H, W, C)``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import activations
from .activations import sigmoid


class ShapeError(ValueError):
    pass


_SCRATCH = {}


def _scratch(shape, dtype):
    """Temporary array from one growing per-dtype pool; valid until the next call."""
    size = int(np.prod(shape))
    dtype = np.dtype(dtype)
    flat = _SCRATCH.get(dtype)
    if flat is None or flat.size < size:
        flat = np.empty(size, dtype=dtype)
        _SCRATCH[dtype] = flat
    return flat[:size].reshape(shape)


def clear_scratch():
    _SCRATCH.clear()


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base class. Subclasses set ``kind`` and implement the three hooks."""

    kind = "layer"
    trainable = True

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.state = {}
        self.input_shape = None
        self.output_shape = None
        self._cache = None

    def build(self, input_shape, rng, dtype=np.float64):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.output_shape = self._build(self.input_shape, rng, np.dtype(dtype))
        return self.output_shape

    def _build(self, input_shape, rng, dtype):
        return input_shape

    def _check_input(self, x):
        if self.input_shape is None:
            raise RuntimeError(f"{self.kind} layer used before build()")
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"{self.kind} layer expects per-sample shape {self.input_shape}, "
                f"got {tuple(x.shape[1:])}"
            )

    def forward(self, x, training=False):
        self._check_input(x)
        return self._forward(x, training)

    def backward(self, dy):
        """Return ``(dx, grads)`` for upstream gradient ``dy``.

        ``grads`` maps parameter names to arrays shaped like ``params``; it is
        also stored on ``self.grads``.
        """
        if self._cache is None:
            raise RuntimeError(f"{self.kind} backward called without a cached forward pass")
        if self.output_shape is not None and tuple(dy.shape[1:]) != self.output_shape:
            raise ShapeError(
                f"{self.kind} upstream gradient shape {tuple(dy.shape[1:])} does not "
                f"match output shape {self.output_shape}"
            )
        dx = self._backward(dy)
        return dx, self.grads

    def reset_states(self):
        pass

    def release(self):
        """Drop cached activations and work buffers (a new forward rebuilds them)."""
        self._cache = None

    def config(self):
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class _Activated(Layer):
    """Mixin logic for layers that apply an activation after an affine map."""

    def __init__(self, activation="linear"):
        super().__init__()
        self.activation = activation
        self._act, self._dact = activations.get(activation)

    def _activate(self, z):
        a = self._act(z)
        return a

    def _dz(self, dy, z, a):
        if self.activation == "linear":
            return dy
        return dy * self._dact(z, a)


class Dense(_Activated):
    kind = "dense"

    def __init__(self, units, activation="linear"):
        super().__init__(activation)
        if units <= 0:
            raise ValueError("units must be positive")
        self.units = int(units)

    def config(self):
        return {"units": self.units, "activation": self.activation}

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 1:
            raise ShapeError(f"dense layer needs flat input, got per-sample shape {input_shape}")
        n_in = input_shape[0]
        self.params = {
            "kernel": glorot_uniform(rng, (n_in, self.units), n_in, self.units, dtype),
            "bias": np.zeros(self.units, dtype=dtype),
        }
        return (self.units,)

    def _forward(self, x, training):
        z = x @ self.params["kernel"] + self.params["bias"]
        a = self._activate(z)
        self._cache = (x, z, a)
        return a

    def _backward(self, dy):
        x, z, a = self._cache
        dz = self._dz(dy, z, a)
        self.grads = {"kernel": x.T @ dz, "bias": dz.sum(axis=0)}
        return dz @ self.params["kernel"].T


def _same_padding(k):
    total = k - 1
    return total // 2, total - total // 2


class Conv2D(_Activated):
    """Stride-1 convolution with zero 'same' padding, channels-last.

    Implemented as im2col + one matrix product. The kernel is stored as
    ``(kh, kw, in_channels, filters)``.
    """

    kind = "conv2d"

    def __init__(self, filters, kernel, activation="linear"):
        super().__init__(activation)
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        if filters <= 0 or min(kernel) <= 0:
            raise ValueError("filters and kernel extents must be positive")
        self.filters = int(filters)
        self.kernel = tuple(int(k) for k in kernel)
        self._buffers = {}
        # the first layer of a model has no use for its input gradient
        self.input_grad = True

    def config(self):
        return {"filters": self.filters, "kernel": self.kernel, "activation": self.activation}

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d layer needs (h, w, c) input, got {input_shape}")
        h, w, c = input_shape
        kh, kw = self.kernel
        self.params = {
            "kernel": glorot_uniform(
                rng, (kh, kw, c, self.filters), kh * kw * c, kh * kw * self.filters, dtype
            ),
            "bias": np.zeros(self.filters, dtype=dtype),
        }
        return (h, w, self.filters)

    def release(self):
        super().release()
        self._buffers = {}

    def _buffer(self, key, shape, dtype):
        # reused across calls: large fresh allocations dominate runtime otherwise
        if key is None:
            return _scratch(shape, dtype)
        buf = self._buffers.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._buffers[key] = buf
        return buf

    def _im2col(self, x, pads, key):
        n, h, w, c = x.shape
        kh, kw = self.kernel
        if kh == 1 and kw == 1:
            return x.reshape(n * h * w, c)
        (pt, pb), (pl, pr) = pads
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        windows = sliding_window_view(xp, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
        cols = self._buffer(key, windows.shape, x.dtype)
        np.copyto(cols, windows)
        return cols.reshape(n * h * w, kh * kw * c)

    def _forward(self, x, training):
        n, h, w, _ = x.shape
        pads = (_same_padding(self.kernel[0]), _same_padding(self.kernel[1]))
        cols = self._im2col(x, pads, "cols")
        kmat = self.params["kernel"].reshape(-1, self.filters)
        z = (cols @ kmat + self.params["bias"]).reshape(n, h, w, self.filters)
        a = self._activate(z)
        self._cache = (x.shape, cols, z, a)
        return a

    def _backward(self, dy):
        shape, cols, z, a = self._cache
        dz = self._dz(dy, z, a)
        dz2 = dz.reshape(-1, self.filters)
        kernel = self.params["kernel"]
        self.grads = {
            "kernel": (cols.T @ dz2).reshape(kernel.shape),
            "bias": dz2.sum(axis=0),
        }
        if not self.input_grad:
            return None
        # input gradient = correlation of dz with the flipped, transposed kernel;
        # same-padding offsets swap sides
        (pt, pb), (pl, pr) = _same_padding(self.kernel[0]), _same_padding(self.kernel[1])
        dcols = self._im2col(dz, ((pb, pt), (pr, pl)), None)
        flipped = kernel[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, shape[-1])
        return (dcols @ flipped).reshape(shape)


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 3 or input_shape[0] % 2 or input_shape[1] % 2:
            raise ShapeError(f"maxpool2x2 needs (h, w, c) with even h and w, got {input_shape}")
        h, w, c = input_shape
        return (h // 2, w // 2, c)

    def _forward(self, x, training):
        n, h, w, c = x.shape
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = win.reshape(n, h // 2, w // 2, c, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def _backward(self, dy):
        (n, h, w, c), idx = self._cache
        dwin = np.zeros((n, h // 2, w // 2, c, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        self.grads = {}
        return dwin.reshape(n, h, w, c)


class UpSample2x2(Layer):
    """Nearest-neighbour 2x upsampling."""

    kind = "upsample2x2"

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 3:
            raise ShapeError(f"upsample2x2 needs (h, w, c) input, got {input_shape}")
        h, w, c = input_shape
        return (2 * h, 2 * w, c)

    def _forward(self, x, training):
        self._cache = True
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def _backward(self, dy):
        n, h2, w2, c = dy.shape
        self.grads = {}
        return dy.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


class BatchNorm(Layer):
    """Batch normalisation over the last (feature/channel) axis.

    Training mode normalises with batch statistics and updates running
    averages; inference mode uses the running averages. The averages are
    debiased exponential moving averages: the first batch enters with weight
    1, so short trainings do not leave them anchored at their 0/1 start.
    """

    kind = "batchnorm"

    def __init__(self, momentum=0.99, eps=1e-3):
        super().__init__()
        self.momentum = momentum
        self.eps = eps

    def config(self):
        return {"momentum": self.momentum, "eps": self.eps}

    def _build(self, input_shape, rng, dtype):
        c = input_shape[-1]
        self.params = {"gamma": np.ones(c, dtype=dtype), "beta": np.zeros(c, dtype=dtype)}
        self.state = {
            "mean": np.zeros(c, dtype=dtype),
            "var": np.ones(c, dtype=dtype),
            "updates": np.zeros(1, dtype=dtype),
        }
        return input_shape

    def _forward(self, x, training):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            xc = x - mean
            var = (xc * xc).mean(axis=axes)
            t = self.state["updates"] + 1
            w = (1 - self.momentum) / (1 - self.momentum**t)
            self.state["mean"] = self.state["mean"] + w * (mean - self.state["mean"])
            self.state["var"] = self.state["var"] + w * (var - self.state["var"])
            self.state["updates"] = t
        else:
            xc = x - self.state["mean"]
            var = self.state["var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std, training)
        return xhat * self.params["gamma"] + self.params["beta"]

    def _backward(self, dy):
        xhat, inv_std, training = self._cache
        axes = tuple(range(dy.ndim - 1))
        gamma = self.params["gamma"]
        self.grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = dy * gamma
        if not training:
            return dxhat * inv_std
        m = dy.size // dy.shape[-1]
        return (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
        )


class Flatten(Layer):
    kind = "flatten"

    def _build(self, input_shape, rng, dtype):
        return (int(np.prod(input_shape)),)

    def _forward(self, x, training):
        self._cache = True
        return x.reshape(x.shape[0], -1)

    def _backward(self, dy):
        self.grads = {}
        return dy.reshape((dy.shape[0],) + self.input_shape)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, target_shape):
        super().__init__()
        self.target_shape = tuple(int(d) for d in target_shape)

    def config(self):
        return {"target_shape": self.target_shape}

    def _build(self, input_shape, rng, dtype):
        if np.prod(input_shape) != np.prod(self.target_shape):
            raise ShapeError(f"cannot reshape {input_shape} into {self.target_shape}")
        return self.target_shape

    def _forward(self, x, training):
        self._cache = True
        return x.reshape((x.shape[0],) + self.target_shape)

    def _backward(self, dy):
        self.grads = {}
        return dy.reshape((dy.shape[0],) + self.input_shape)


class Activation(_Activated):
    kind = "activation"

    def config(self):
        return {"activation": self.activation}

    def _forward(self, x, training):
        a = self._activate(x)
        self._cache = (x, a)
        return a

    def _backward(self, dy):
        x, a = self._cache
        self.grads = {}
        return self._dz(dy, x, a)


def lstm_step(x, h, c, kernel, recurrent, bias):
    """One LSTM step. Gate order along the last axis is (input, forget, cell, output)."""
    u = h.shape[1]
    z = x @ kernel + h @ recurrent + bias
    gates = sigmoid(z)
    i, f, o = gates[:, :u], gates[:, u : 2 * u], gates[:, 3 * u :]
    g = np.tanh(z[:, 2 * u : 3 * u])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (x, h, c, i, f, g, o, tc)


def lstm_step_backward(dh_new, dc_new, cache, kernel, recurrent):
    """Backward of :func:`lstm_step`; returns ``(dx, dh, dc, dkernel, drecurrent, dbias)``."""
    x, h, c, i, f, g, o, tc = cache
    do = dh_new * tc
    dc_total = dc_new + dh_new * o * (1 - tc * tc)
    dz = np.concatenate(
        [
            dc_total * g * i * (1 - i),
            dc_total * c * f * (1 - f),
            dc_total * i * (1 - g * g),
            do * o * (1 - o),
        ],
        axis=1,
    )
    dx = dz @ kernel.T
    dh = dz @ recurrent.T
    dc = dc_total * f
    return dx, dh, dc, x.T @ dz, h.T @ dz, dz.sum(axis=0)


def _lstm_params(rng, n_in, units, dtype, forget_bias=1.0):
    bias = np.zeros(4 * units, dtype=dtype)
    bias[units : 2 * units] = forget_bias
    return {
        "kernel": glorot_uniform(rng, (n_in, 4 * units), n_in, 4 * units, dtype),
        "recurrent": glorot_uniform(rng, (units, 4 * units), units, 4 * units, dtype),
        "bias": bias,
    }


class LSTMCell(Layer):
    """Single LSTM step exposed as a layer: ``(x, h, c) -> (h', c')``."""

    kind = "lstm-cell"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def config(self):
        return {"units": self.units}

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 1:
            raise ShapeError(f"lstm-cell needs flat input, got {input_shape}")
        self.params = _lstm_params(rng, input_shape[0], self.units, dtype)
        return (self.units,)

    def forward(self, x, h=None, c=None, training=False):
        self._check_input(x)
        n = x.shape[0]
        if h is None:
            h = np.zeros((n, self.units), dtype=x.dtype)
        if c is None:
            c = np.zeros((n, self.units), dtype=x.dtype)
        if h.shape != (n, self.units) or c.shape != (n, self.units):
            raise ShapeError(
                f"lstm-cell state must be ({n}, {self.units}), got h{h.shape} c{c.shape}"
            )
        p = self.params
        h_new, c_new, self._cache = lstm_step(x, h, c, p["kernel"], p["recurrent"], p["bias"])
        return h_new, c_new

    def backward(self, dh_new, dc_new=None):
        """Return ``((dx, dh, dc), grads)``."""
        if self._cache is None:
            raise RuntimeError("lstm-cell backward called without a cached forward pass")
        if dc_new is None:
            dc_new = np.zeros_like(dh_new)
        p = self.params
        dx, dh, dc, dk, dr, db = lstm_step_backward(
            dh_new, dc_new, self._cache, p["kernel"], p["recurrent"]
        )
        self.grads = {"kernel": dk, "recurrent": dr, "bias": db}
        return (dx, dh, dc), self.grads


class LSTM(Layer):
    """LSTM over a ``(T, features)`` sequence returning the last hidden state.

    With ``stateful=True`` the final ``(h, c)`` of one call seeds the next
    call until :meth:`reset_states`; gradients are truncated at the call
    boundary.
    """

    kind = "lstm"

    def __init__(self, units, stateful=False):
        super().__init__()
        self.units = int(units)
        self.stateful = stateful
        self._h = None
        self._c = None

    def config(self):
        return {"units": self.units, "stateful": self.stateful}

    def _build(self, input_shape, rng, dtype):
        if len(input_shape) != 2:
            raise ShapeError(f"lstm needs (steps, features) input, got {input_shape}")
        self.params = _lstm_params(rng, input_shape[1], self.units, dtype)
        return (self.units,)

    def reset_states(self):
        self._h = None
        self._c = None

    def _forward(self, x, training):
        n, steps, _ = x.shape
        if self.stateful and self._h is not None and self._h.shape[0] == n:
            h, c = self._h, self._c
        else:
            h = np.zeros((n, self.units), dtype=x.dtype)
            c = np.zeros((n, self.units), dtype=x.dtype)
        p = self.params
        kernel, recurrent, bias = p["kernel"], p["recurrent"], p["bias"]
        caches = []
        for t in range(steps):
            h, c, cache = lstm_step(x[:, t, :], h, c, kernel, recurrent, bias)
            caches.append(cache)
        if self.stateful:
            self._h, self._c = h, c
        self._cache = caches
        return h

    def _backward(self, dy):
        caches = self._cache
        p = self.params
        kernel, recurrent = p["kernel"], p["recurrent"]
        n = dy.shape[0]
        dx = np.empty((n, len(caches), kernel.shape[0]), dtype=dy.dtype)
        dk = np.zeros_like(kernel)
        dr = np.zeros_like(recurrent)
        db = np.zeros_like(p["bias"])
        dh, dc = dy, np.zeros_like(dy)
        for t in range(len(caches) - 1, -1, -1):
            dx[:, t, :], dh, dc, gk, gr, gb = lstm_step_backward(
                dh, dc, caches[t], kernel, recurrent
            )
            dk += gk
            dr += gr
            db += gb
        self.grads = {"kernel": dk, "recurrent": dr, "bias": db}
        return dx


LAYER_KINDS = {
    cls.kind: cls
    for cls in (
        Dense,
        Conv2D,
        MaxPool2x2,
        UpSample2x2,
        BatchNorm,
        Flatten,
        Reshape,
        Activation,
        LSTMCell,
        LSTM,
    )
}
