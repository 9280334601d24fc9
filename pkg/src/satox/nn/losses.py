"""Loss functions returning ``(value, gradient_wrt_pred)``."""

import numpy as np


def _check_shapes(pred, target, name):
    if pred.shape != target.shape:
        raise ValueError(f"{name}: prediction shape {pred.shape} != target shape {target.shape}")


def mae(pred, target):
    _check_shapes(pred, target, "mae")
    diff = pred - target
    # np.sign(0) == 0, so exact fits produce no update
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def mse(pred, target):
    _check_shapes(pred, target, "mse")
    diff = pred - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def masked_mse(pred, target, mask):
    """Mean squared error over entries where ``mask`` is 1.

    ``mask`` may be the full shape of ``pred`` or omit the trailing channel
    axis (one validity flag per pixel, shared by all channels).
    """
    _check_shapes(pred, target, "masked_mse")
    mask = np.asarray(mask)
    if mask.shape != pred.shape:
        if mask.shape == pred.shape[:-1]:
            mask = np.broadcast_to(mask[..., None], pred.shape)
        else:
            raise ValueError(f"masked_mse: mask shape {mask.shape} incompatible with {pred.shape}")
    valid = mask.astype(bool)
    count = int(valid.sum())
    if count == 0:
        raise ValueError("masked_mse: no valid pixels")
    diff = np.where(valid, pred - target, 0.0).astype(pred.dtype)
    return float((diff * diff).sum() / count), 2.0 * diff / count


LOSSES = {"mae": mae, "mse": mse, "masked-mse": masked_mse}


def get(name):
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; expected one of {sorted(LOSSES)}") from None
