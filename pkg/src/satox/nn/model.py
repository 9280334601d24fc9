"""Sequential container and the mini-batch training loop."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses as _losses
from .layers import LAYER_KINDS, Layer, ShapeError
from .optim import NonFiniteGradientError, Optimizer

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, message):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class Sequential:
    """A stack of layers built for a fixed per-sample input shape."""

    def __init__(self, layers, input_shape, seed=0, dtype=np.float64, input_grad=True):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
        self.output_shape = shape
        if not input_grad and hasattr(self.layers[0], "input_grad"):
            # skips the costliest unused product when training on raw data
            self.layers[0].input_grad = False

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=self.dtype)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"model expects per-sample shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    __call__ = forward

    def backward(self, dy):
        """Backpropagate ``dy``; returns the input gradient (None if the first layer skips it)."""
        for layer in reversed(self.layers):
            dy, _ = layer.backward(dy)
        return dy

    def reset_states(self):
        for layer in self.layers:
            layer.reset_states()

    def release_buffers(self):
        """Free per-layer caches; called when training ends."""
        for layer in self.layers:
            layer.release()

    @property
    def stateful(self):
        return any(getattr(layer, "stateful", False) for layer in self.layers)

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{layer.kind}.{name}", p

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def gradients(self):
        return [layer.grads[name] for layer in self.layers for name in layer.params]

    def count_params(self):
        return int(sum(p.size for p in self.parameters()))

    def get_weights(self):
        """Deep copy of trainable parameters and non-trainable state."""
        return [
            ({k: v.copy() for k, v in layer.params.items()}, {k: v.copy() for k, v in layer.state.items()})
            for layer in self.layers
        ]

    def set_weights(self, weights):
        for layer, (params, state) in zip(self.layers, weights):
            for k, v in params.items():
                layer.params[k][...] = v
            for k, v in state.items():
                layer.state[k] = v.copy()

    def predict(self, x, batch_size=256):
        """Inference-mode forward pass. Stateful layers start from a reset state."""
        x = np.asarray(x, dtype=self.dtype)
        self.reset_states()
        if self.stateful:
            batch_size = 1
        out = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        self.reset_states()
        if not out:
            return np.empty((0,) + self.output_shape, dtype=self.dtype)
        return np.concatenate(out)

    def describe(self):
        return [(layer.kind, layer.config()) for layer in self.layers]

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Sequential([{inner}], input_shape={self.input_shape})"


def layer_from_config(kind, config):
    return LAYER_KINDS[kind](**config)


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 1000
    patience: int = 100
    loss: str = "mae"
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        _losses.get(self.loss)


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    @property
    def epochs(self):
        return len(self.train_loss)

    @property
    def best_val_loss(self):
        return self.val_loss[self.best_epoch - 1] if self.val_loss else float("nan")

    def rows(self):
        return [(i + 1, t, v) for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))]


def _unpack(dataset, name):
    if len(dataset) == 2:
        x, y = dataset
        mask = None
    elif len(dataset) == 3:
        x, y, mask = dataset
    else:
        raise ValueError(f"{name} set must be (x, y) or (x, y, mask)")
    if len(x) == 0:
        raise ValueError(f"{name} set is empty")
    if len(x) != len(y) or (mask is not None and len(mask) != len(x)):
        raise ValueError(f"{name} set arrays differ in length")
    return x, y, mask


def evaluate(model, dataset, loss="mae", batch_size=256):
    """Loss of ``model`` in inference mode, averaged over samples/valid entries."""
    x, y, mask = _unpack(dataset, "evaluation")
    loss_fn = _losses.get(loss)
    pred = model.predict(x, batch_size=batch_size)
    y = np.asarray(y, dtype=model.dtype).reshape(pred.shape)
    if mask is None:
        return loss_fn(pred, y)[0]
    return loss_fn(pred, y, mask)[0]


def _prepare(model, train, config):
    x, y, mask = _unpack(train, "training")
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype).reshape((len(x),) + model.output_shape)
    return x, y, mask


def _train_epoch(model, x, y, mask, order, batch_size, loss_fn, optimizer, epoch):
    names = [name for name, _ in model.named_parameters()]
    params = model.parameters()
    model.reset_states()
    total = 0.0
    for start in range(0, len(x), batch_size):
        idx = order[start : start + batch_size]
        pred = model.forward(x[idx], training=True)
        if mask is None:
            value, grad = loss_fn(pred, y[idx])
        else:
            value, grad = loss_fn(pred, y[idx], mask[idx])
        if not np.isfinite(value):
            raise TrainingDivergedError(epoch, "non-finite training loss")
        model.backward(grad)
        try:
            optimizer.step(params, model.gradients(), names)
        except NonFiniteGradientError as err:
            err.epoch = epoch
            raise TrainingDivergedError(epoch, str(err)) from err
        total += value * len(idx)
    model.reset_states()
    return total / len(x)


def _order(rng, n, config, stateful):
    if config.shuffle and not stateful:
        return rng.permutation(n)
    return np.arange(n)


def fit(model, train, validation, config, optimizer):
    """Train ``model`` in place with early stopping on validation loss.

    ``train`` and ``validation`` are ``(x, y)`` or ``(x, y, mask)`` tuples.
    The model ends holding the weights of its best validation epoch.
    Stateful models are fed in order with batch size 1 and their state is
    reset at every epoch start.
    """
    if not isinstance(optimizer, Optimizer):
        raise TypeError("optimizer must be an Optimizer instance")
    if config.patience >= config.max_epochs:
        raise ValueError("patience must be smaller than max_epochs")
    x, y, mask = _prepare(model, train, config)
    _unpack(validation, "validation")
    loss_fn = _losses.get(config.loss)
    rng = np.random.default_rng(config.seed)
    stateful = model.stateful
    batch_size = 1 if stateful else config.batch_size

    history = History()
    best_val = np.inf
    best_weights = model.get_weights()
    wait = 0
    for epoch in range(1, config.max_epochs + 1):
        order = _order(rng, len(x), config, stateful)
        train_loss = _train_epoch(model, x, y, mask, order, batch_size, loss_fn, optimizer, epoch)
        val = evaluate(model, validation, config.loss, batch_size=batch_size)
        if not np.isfinite(val):
            raise TrainingDivergedError(epoch, "non-finite validation loss")
        history.train_loss.append(train_loss)
        history.val_loss.append(val)
        if val < best_val:
            best_val = val
            best_weights = model.get_weights()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                history.stopped_early = True
                log.debug("early stop at epoch %d (best %d)", epoch, history.best_epoch)
                break
    model.set_weights(best_weights)
    model.reset_states()
    model.release_buffers()
    return history


def train_fixed_epochs(model, train, epochs, config, optimizer):
    """Train for exactly ``epochs`` epochs without a validation set; returns per-epoch losses."""
    x, y, mask = _prepare(model, train, config)
    loss_fn = _losses.get(config.loss)
    rng = np.random.default_rng(config.seed)
    stateful = model.stateful
    batch_size = 1 if stateful else config.batch_size
    losses = [
        _train_epoch(
            model, x, y, mask, _order(rng, len(x), config, stateful), batch_size, loss_fn, optimizer, epoch
        )
        for epoch in range(1, epochs + 1)
    ]
    model.release_buffers()
    return losses


__all__ = [
    "Layer",
    "Sequential",
    "TrainConfig",
    "History",
    "TrainingDivergedError",
    "fit",
    "evaluate",
    "train_fixed_epochs",
    "layer_from_config",
]
