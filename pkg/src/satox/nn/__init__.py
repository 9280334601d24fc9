"""Minimal numpy neural-network engine: layers, losses, optimizers, training loop."""

from .layers import (
    LSTM,
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    Layer,
    LSTMCell,
    MaxPool2x2,
    Reshape,
    ShapeError,
    UpSample2x2,
)
from .losses import mae, masked_mse, mse
from .model import History, Sequential, TrainConfig, TrainingDivergedError, evaluate, fit, train_fixed_epochs
from .optim import Adam, NonFiniteGradientError, RMSProp

__all__ = [
    "LSTM",
    "Activation",
    "Adam",
    "BatchNorm",
    "Conv2D",
    "Dense",
    "Flatten",
    "History",
    "Layer",
    "LSTMCell",
    "MaxPool2x2",
    "NonFiniteGradientError",
    "RMSProp",
    "Reshape",
    "Sequential",
    "ShapeError",
    "TrainConfig",
    "TrainingDivergedError",
    "UpSample2x2",
    "evaluate",
    "fit",
    "mae",
    "masked_mse",
    "mse",
    "train_fixed_epochs",
]
