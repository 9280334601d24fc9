"""Adam and RMSProp with in-place parameter updates."""

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name, epoch=None):
        self.name = name
        self.epoch = epoch
        where = f" at epoch {epoch}" if epoch is not None else ""
        super().__init__(f"non-finite gradient for parameter {name!r}{where}")


class Optimizer:
    kind = "optimizer"

    def __init__(self, learning_rate=0.001):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        self.learning_rate = learning_rate
        self.iterations = 0
        self._slots = None

    def _init_slots(self, params):
        raise NotImplementedError

    def step(self, params, grads, names=None):
        """Update ``params`` in place from ``grads`` (parallel lists of arrays)."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        names = names or [f"param[{i}]" for i in range(len(params))]
        for p, g, name in zip(params, grads, names):
            if p.shape != g.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(name)
        if self._slots is None:
            self._init_slots(params)
        self.iterations += 1
        self._apply(params, grads)

    def state_dict(self):
        return {"iterations": self.iterations, "slots": self._slots}


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, learning_rate=0.001, beta_1=0.9, beta_2=0.999, epsilon=1e-8):
        super().__init__(learning_rate)
        self.beta_1 = beta_1
        self.beta_2 = beta_2
        self.epsilon = epsilon

    def _init_slots(self, params):
        self._slots = {
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
        }

    def _apply(self, params, grads):
        t = self.iterations
        b1, b2 = self.beta_1, self.beta_2
        lr_t = self.learning_rate * np.sqrt(1 - b2**t) / (1 - b1**t)
        eps_t = self.epsilon * np.sqrt(1 - b2**t)
        for p, g, m, v in zip(params, grads, self._slots["m"], self._slots["v"]):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            # equivalent to lr * m_hat / (sqrt(v_hat) + eps)
            p -= (lr_t * m / (np.sqrt(v) + eps_t)).astype(p.dtype, copy=False)


class RMSProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, learning_rate=0.001, rho=0.9, epsilon=1e-8):
        super().__init__(learning_rate)
        self.rho = rho
        self.epsilon = epsilon

    def _init_slots(self, params):
        self._slots = {"ms": [np.zeros_like(p) for p in params]}

    def _apply(self, params, grads):
        rho, lr = self.rho, self.learning_rate
        for p, g, ms in zip(params, grads, self._slots["ms"]):
            ms *= rho
            ms += (1 - rho) * (g * g)
            p -= (lr * g / (np.sqrt(ms) + self.epsilon)).astype(p.dtype, copy=False)


OPTIMIZERS = {"adam": Adam, "rmsprop": RMSProp}


def get(name, **kwargs):
    try:
        return OPTIMIZERS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown optimizer {name!r}; expected one of {sorted(OPTIMIZERS)}") from None
