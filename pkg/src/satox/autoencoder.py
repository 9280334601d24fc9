"""Masked convolutional autoencoders that compress 64x64x3 patches to 4 features.

Invalid pixels are given either as NaN in the input array or through an
explicit ``mask``; they are zero-filled after per-channel min-max scaling and
excluded from the reconstruction loss.
"""

import csv
import datetime as dt
import itertools
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .nn import io as nn_io

log = logging.getLogger(__name__)

SCHEMES = ("conv-pool", "conv-conv-pool")
KERNEL_GRID = ((3, 3, 3), (5, 5, 5), (3, 5, 5), (3, 5, 7))
FILTER_GRID = ((16, 16, 16), (32, 32, 32), (16, 32, 64), (32, 64, 128))
LATENT_SIZE = 4
PATCH_SHAPE = (64, 64, 3)
CONV_ACTIVATION = "relu"
BOTTLENECK_ACTIVATION = "elu"


@dataclass(frozen=True)
class AEConfig:
    scheme: str = "conv-pool"
    kernels: tuple = (3, 5, 5)
    filters: tuple = (32, 32, 32)
    latent_size: int = LATENT_SIZE

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "filters", tuple(int(f) for f in self.filters))
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.kernels not in KERNEL_GRID:
            raise ValueError(f"kernels {self.kernels} not in {KERNEL_GRID}")
        if self.filters not in FILTER_GRID:
            raise ValueError(f"filters {self.filters} not in {FILTER_GRID}")
        if self.latent_size != LATENT_SIZE:
            raise ValueError(f"latent_size is fixed at {LATENT_SIZE}")

    @property
    def label(self):
        k = "-".join(map(str, self.kernels))
        f = "-".join(map(str, self.filters))
        return f"{self.scheme}/k{k}/f{f}"


def config_grid(schemes=SCHEMES, kernels=KERNEL_GRID, filters=FILTER_GRID):
    return [AEConfig(s, k, f) for s, k, f in itertools.product(schemes, kernels, filters)]


def build_layers(config, bn_momentum=0.99):
    """Layer list for ``config`` and the index where the decoder starts."""
    convs = 2 if config.scheme == "conv-conv-pool" else 1
    layers = []
    for k, f in zip(config.kernels, config.filters):
        layers += [nn.Conv2D(f, k, CONV_ACTIVATION) for _ in range(convs)]
        layers += [nn.MaxPool2x2(), nn.BatchNorm(bn_momentum)]
    f3 = config.filters[-1]
    layers += [nn.Flatten(), nn.Dense(config.latent_size, BOTTLENECK_ACTIVATION)]
    n_encoder = len(layers)
    layers += [nn.Dense(8 * 8 * f3, BOTTLENECK_ACTIVATION), nn.Reshape((8, 8, f3))]
    for k, f in zip(reversed(config.kernels), reversed(config.filters)):
        layers.append(nn.UpSample2x2())
        layers += [nn.Conv2D(f, k, CONV_ACTIVATION) for _ in range(convs)]
        layers.append(nn.BatchNorm(bn_momentum))
    layers.append(nn.Conv2D(PATCH_SHAPE[-1], 3, "linear"))
    return layers, n_encoder


def build_autoencoder(config, seed=0, dtype=np.float64, bn_momentum=0.99):
    """Untrained ``(model, n_encoder_layers)`` for ``config``."""
    if not isinstance(config, AEConfig):
        raise TypeError("config must be an AEConfig")
    layers, n_encoder = build_layers(config, bn_momentum)
    model = nn.Sequential(layers, PATCH_SHAPE, seed=seed, dtype=dtype, input_grad=False)
    return model, n_encoder


def split_validity(X, mask=None):
    """Return ``(values, mask)``; ``mask`` is (n, 64, 64) bool of valid pixels."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1:] != PATCH_SHAPE:
        raise ValueError(f"patches must have shape (n, 64, 64, 3), got {X.shape}")
    finite = np.isfinite(X).all(axis=-1)
    if mask is None:
        mask = finite
    else:
        mask = np.asarray(mask, dtype=bool) & finite
        if mask.shape != X.shape[:3]:
            raise ValueError(f"mask must have shape {X.shape[:3]}, got {mask.shape}")
    return X, mask


def channel_bounds(X, mask):
    valid = X[mask]
    if valid.size == 0:
        raise ValueError("no valid pixels to derive channel bounds from")
    lo, hi = valid.min(axis=0), valid.max(axis=0)
    flat = hi <= lo
    if flat.any():
        # unit span: a constant channel normalises to 0 instead of dividing by zero
        log.warning("channel(s) %s constant over valid training pixels", np.flatnonzero(flat).tolist())
        hi = np.where(flat, lo + 1.0, hi)
    return lo, hi


class MaskedConvAutoencoder(BaseEstimator, TransformerMixin):
    """Convolutional autoencoder with a 4-unit bottleneck and masked MSE loss.

    ``fit`` with ``validation_data`` uses early stopping and keeps the best
    epoch; without it the model trains for exactly ``max_epochs`` epochs.
    ``transform`` returns the bottleneck activations.
    """

    def __init__(
        self,
        scheme="conv-pool",
        kernels=(3, 5, 5),
        filters=(32, 32, 32),
        latent_size=LATENT_SIZE,
        learning_rate=0.001,
        batch_size=16,
        max_epochs=1000,
        patience=100,
        seed=0,
        dtype="float64",
        bn_momentum=0.99,
    ):
        self.scheme = scheme
        self.kernels = kernels
        self.filters = filters
        self.latent_size = latent_size
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.dtype = dtype
        self.bn_momentum = bn_momentum

    @property
    def config(self):
        return AEConfig(self.scheme, self.kernels, self.filters, self.latent_size)

    @classmethod
    def from_config(cls, config, **params):
        return cls(
            scheme=config.scheme,
            kernels=config.kernels,
            filters=config.filters,
            latent_size=config.latent_size,
            **params,
        )

    def normalize(self, X, mask=None):
        """Scale to [0, 1] with training bounds (clamped) and zero-fill invalid pixels."""
        check_is_fitted(self, "channel_min_")
        X, mask = split_validity(X, mask)
        Xn = np.clip((X - self.channel_min_) / (self.channel_max_ - self.channel_min_), 0.0, 1.0)
        Xn[~mask] = 0.0
        return Xn, mask

    def denormalize(self, Xn):
        check_is_fitted(self, "channel_min_")
        return np.asarray(Xn, dtype=np.float64) * (self.channel_max_ - self.channel_min_) + self.channel_min_

    def _validation_set(self, validation_data):
        if isinstance(validation_data, tuple):
            Xv, mv = validation_data
        else:
            Xv, mv = validation_data, None
        Xv, mv = self.normalize(Xv, mv)
        if not mv.any():
            raise ValueError("validation patches contain no valid pixels")
        return Xv, Xv, mv

    def fit(self, X, y=None, mask=None, validation_data=None):
        X, mask = split_validity(X, mask)
        if len(X) == 0:
            raise ValueError("no training patches")
        self.channel_min_, self.channel_max_ = channel_bounds(X, mask)
        Xn, mask = self.normalize(X, mask)
        self.model_, self.n_encoder_layers_ = build_autoencoder(
            self.config, seed=self.seed, dtype=np.dtype(self.dtype), bn_momentum=self.bn_momentum
        )
        # the reconstruction starts as the per-channel training mean
        out_layer = self.model_.layers[-1]
        out_layer.params["kernel"][...] = 0.0
        out_layer.params["bias"][...] = Xn[mask].mean(axis=0)
        optimizer = nn.Adam(self.learning_rate)
        started = time.perf_counter()
        try:
            if validation_data is None:
                config = nn.TrainConfig(
                    batch_size=self.batch_size, max_epochs=self.max_epochs, loss="masked-mse", seed=self.seed
                )
                losses = nn.train_fixed_epochs(self.model_, (Xn, Xn, mask), self.max_epochs, config, optimizer)
                self.history_ = nn.History(train_loss=losses, val_loss=[np.nan] * len(losses))
                self.history_.best_epoch = len(losses)
            else:
                config = nn.TrainConfig(
                    batch_size=self.batch_size,
                    max_epochs=self.max_epochs,
                    patience=self.patience,
                    loss="masked-mse",
                    seed=self.seed,
                )
                self.history_ = nn.fit(
                    self.model_, (Xn, Xn, mask), self._validation_set(validation_data), config, optimizer
                )
        except nn.TrainingDivergedError as err:
            raise nn.TrainingDivergedError(err.epoch, f"{self.config.label}: {err}") from err
        self.fit_seconds_ = time.perf_counter() - started
        return self

    def _encode_normalized(self, Xn):
        out = np.asarray(Xn, dtype=self.model_.dtype)
        for layer in self.model_.layers[: self.n_encoder_layers_]:
            out = layer.forward(out, training=False)
        return out

    def transform(self, X, mask=None, batch_size=None):
        check_is_fitted(self, "model_")
        Xn, _ = self.normalize(X, mask)
        batch_size = batch_size or self.batch_size
        parts = [self._encode_normalized(Xn[i : i + batch_size]) for i in range(0, len(Xn), batch_size)]
        return np.concatenate(parts).astype(np.float64) if parts else np.empty((0, self.latent_size))

    def reconstruct(self, X, mask=None):
        """Reconstruction in raw units (invalid pixels included)."""
        check_is_fitted(self, "model_")
        Xn, _ = self.normalize(X, mask)
        return self.denormalize(self.model_.predict(Xn, batch_size=self.batch_size))

    def reconstruction_error(self, X, mask=None):
        """Masked MSE on the normalised scale."""
        check_is_fitted(self, "model_")
        Xn, mask = self.normalize(X, mask)
        return nn.evaluate(self.model_, (Xn, Xn, mask), loss="masked-mse", batch_size=self.batch_size)

    def score(self, X, y=None, mask=None):
        return -self.reconstruction_error(X, mask)

    def count_params(self):
        check_is_fitted(self, "model_")
        return self.model_.count_params()


def count_parameters(config):
    model, _ = build_autoencoder(config, seed=0, dtype=np.float32)
    return model.count_params()


@dataclass
class CandidateResult:
    config: AEConfig
    val_mse: float
    n_params: int
    epochs: int
    best_epoch: int
    seconds: float
    latent_size: int = LATENT_SIZE  # measured on a validation patch


@dataclass
class GridSearchResult:
    best_config: AEConfig
    best_model: MaskedConvAutoencoder  # retrained on all data when requested
    selection_model: MaskedConvAutoencoder  # the winner as trained on the training split
    candidates: list

    @property
    def best_val_mse(self):
        return min(c.val_mse for c in self.candidates if c.config == self.best_config)


def chronological_split(dates, last_train_year=2020):
    years = np.array([d.year for d in dates])
    return years <= last_train_year, years > last_train_year


def _rank_key(result):
    return (result.val_mse, result.n_params)


def grid_search(
    X,
    dates,
    mask=None,
    configs=None,
    last_train_year=2020,
    retrain=True,
    **estimator_params,
):
    """Train every candidate on the training years, keep the lowest validation masked MSE.

    Ties go to the candidate with fewer parameters. With ``retrain`` the
    winner is trained again on all patches for as many epochs as its best
    validation epoch.
    """
    X, mask = split_validity(X, mask)
    train, val = chronological_split(dates, last_train_year)
    if not train.any() or not val.any():
        raise ValueError("chronological split leaves an empty training or validation set")
    configs = list(configs) if configs is not None else config_grid()
    if not configs:
        raise ValueError("no candidate configurations")
    results, best, winner = [], None, None
    for cfg in configs:
        est = MaskedConvAutoencoder.from_config(cfg, **estimator_params)
        est.fit(X[train], mask=mask[train], validation_data=(X[val], mask[val]))
        res = CandidateResult(
            cfg,
            est.history_.best_val_loss,
            est.count_params(),
            est.history_.epochs,
            est.history_.best_epoch,
            est.fit_seconds_,
            est.transform(X[val][:1], mask[val][:1]).shape[1],
        )
        log.info("%s val_mse=%.5f epochs=%d (%.1fs)", cfg.label, res.val_mse, res.epochs, res.seconds)
        results.append(res)
        # only the running winner is kept alive
        if best is None or _rank_key(res) < _rank_key(best):
            best, winner = res, est
    final = winner
    if retrain:
        params = dict(estimator_params)
        params["max_epochs"] = max(best.best_epoch, 1)
        final = MaskedConvAutoencoder.from_config(best.config, **params)
        final.fit(X, mask=mask)
    return GridSearchResult(best.config, final, winner, results)


@dataclass(frozen=True)
class LatentFeatures:
    area: str
    date: dt.date
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != LATENT_SIZE or not all(np.isfinite(vals)):
            raise ValueError(f"latent features must be {LATENT_SIZE} finite values")
        object.__setattr__(self, "values", vals)


def encode_patch(model, patch):
    """Latent features of one :class:`~satox.ingest.SatellitePatch`."""
    check_is_fitted(model, "model_")
    values = model.transform(patch.pixels[None].astype(np.float64), mask=patch.valid_mask[None])[0]
    return LatentFeatures(patch.area, patch.date, values)


def encode_patches(model, patches):
    if not patches:
        return []
    X = np.stack([p.pixels for p in patches]).astype(np.float64)
    M = np.stack([p.valid_mask for p in patches])
    Z = model.transform(X, mask=M)
    return [LatentFeatures(p.area, p.date, z) for p, z in zip(patches, Z)]


LATENT_HEADER = ["area", "date"] + [f"f{i + 1}" for i in range(LATENT_SIZE)]


def write_latent_csv(features, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LATENT_HEADER)
        for f in sorted(features, key=lambda f: (f.area, f.date)):
            writer.writerow([f.area, f.date.isoformat()] + [repr(v) for v in f.values])


def read_latent_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LATENT_HEADER:
            raise ValueError(f"{path}: header must be {','.join(LATENT_HEADER)}")
        return [
            LatentFeatures(row[0], dt.date.fromisoformat(row[1]), [float(v) for v in row[2:]])
            for row in reader
            if row
        ]


AE_MAGIC = b"AEC1"


def dumps_autoencoder(model):
    """``AEC1`` + u32 header length + JSON header, followed by the TXC1 weight blob."""
    check_is_fitted(model, "model_")
    header = {
        "config": asdict(model.config),
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in model.get_params().items()},
        "channel_min": model.channel_min_.tolist(),
        "channel_max": model.channel_max_.tolist(),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    return AE_MAGIC + struct.pack("<I", len(raw)) + raw + nn_io.dumps_weights(model.model_)


def loads_autoencoder(buf):
    buf = bytes(buf)
    if buf[:4] != AE_MAGIC:
        raise nn_io.FormatError("bad magic: not an AEC1 autoencoder file")
    if len(buf) < 8:
        raise nn_io.FormatError("truncated autoencoder header at offset 4")
    (n,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + n:
        raise nn_io.FormatError("truncated autoencoder header at offset 8")
    header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    params = header["params"]
    params["kernels"] = tuple(params["kernels"])
    params["filters"] = tuple(params["filters"])
    est = MaskedConvAutoencoder(**params)
    est.channel_min_ = np.array(header["channel_min"])
    est.channel_max_ = np.array(header["channel_max"])
    est.model_, est.n_encoder_layers_ = build_autoencoder(
        est.config, seed=est.seed, dtype=np.dtype(est.dtype), bn_momentum=est.bn_momentum
    )
    nn_io.loads_weights(est.model_, buf[8 + n :])
    return est


def save_autoencoder(model, path):
    with open(path, "wb") as fh:
        fh.write(dumps_autoencoder(model))


def load_autoencoder(path):
    with open(path, "rb") as fh:
        return loads_autoencoder(fh.read())
