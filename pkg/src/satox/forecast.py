"""Windowed univariate/multivariate datasets and per-horizon MLP/CNN/LSTM forecasters."""

import csv
import datetime as dt
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .autoencoder import LATENT_SIZE

log = logging.getLogger(__name__)

FAMILIES = ("MLP", "CNN", "LSTM")
LAYER_DIMS = (12, 24, 36, 48, 60)
HORIZONS = (1, 2, 3, 4)
CONDITIONS = ("univariate", "multivariate")
WINDOW = 12
SPLITS = ("train", "validation", "test")
LAST_TRAIN_YEAR = 2020
VALIDATION_YEAR = 2021
FEATURE_NAMES = tuple(f"f{i + 1}" for i in range(LATENT_SIZE))


def split_label(iso_year):
    if iso_year <= LAST_TRAIN_YEAR:
        return "train"
    return "validation" if iso_year == VALIDATION_YEAR else "test"


@dataclass
class AlignedSeries:
    """Weekly contamination with the latest latent vector available at each week."""

    area: str
    weeks: np.ndarray  # datetime64[D] Mondays
    ref_dates: np.ndarray  # datetime64[D]
    contamination: np.ndarray  # (n,)
    features: np.ndarray | None = None  # (n, 4)
    feature_dates: np.ndarray | None = None  # datetime64[D], date of the vector used
    splits: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.splits is None:
            years = [d.astype(dt.date).isocalendar()[0] for d in self.weeks]
            self.splits = np.array([split_label(y) for y in years])

    def __len__(self):
        return len(self.contamination)

    def variables(self, condition):
        """``(n, V)`` raw input variables: contamination first, then the latent features."""
        if condition == "univariate":
            return self.contamination[:, None]
        if condition == "multivariate":
            if self.features is None:
                raise ValueError(f"{self.area}: multivariate condition needs latent features")
            return np.column_stack([self.contamination, self.features])
        raise ValueError(f"condition must be one of {CONDITIONS}, got {condition!r}")


def align_features(series, features=None):
    """Attach to each week the latent vector with the greatest date <= its reference date.

    Weeks before the first feature are dropped, for both conditions, so the
    univariate and multivariate datasets share their targets. Gaps between
    features carry the last vector forward.
    """
    if np.isnan(series.values).any():
        raise ValueError(f"{series.area}: series must be imputed before alignment")
    if features is None:
        return AlignedSeries(series.area, series.weeks.copy(), series.ref_dates.copy(), series.values.copy())
    own = sorted((f for f in features if f.area == series.area), key=lambda f: f.date)
    if not own:
        raise ValueError(f"{series.area}: no latent features to align")
    dates = np.array([f.date for f in own], dtype="datetime64[D]")
    values = np.array([f.values for f in own])
    idx = np.searchsorted(dates, series.ref_dates, side="right") - 1
    keep = idx >= 0
    if not keep.any():
        raise ValueError(f"{series.area}: every latent feature postdates the series")
    first = int(np.argmax(keep))
    sel = idx[first:]
    return AlignedSeries(
        series.area,
        series.weeks[first:].copy(),
        series.ref_dates[first:].copy(),
        series.values[first:].copy(),
        values[sel],
        dates[sel],
    )


@dataclass
class MinMaxBounds:
    names: tuple
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, values, names):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(names) or len(values) == 0:
            raise ValueError("bounds need a non-empty (n, V) array with one name per column")
        lo, hi = values.min(axis=0), values.max(axis=0)
        for name, a, b in zip(names, lo, hi):
            if not b > a:
                raise ValueError(f"variable {name!r} is constant on the training split")
        return cls(tuple(names), lo, hi)

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def inverse(self, scaled):
        return np.asarray(scaled, dtype=np.float64) * (self.hi - self.lo) + self.lo

    def inverse_target(self, scaled):
        """Inverse scaling of contamination (variable 0) alone."""
        return np.asarray(scaled, dtype=np.float64) * (self.hi[0] - self.lo[0]) + self.lo[0]


def minmax_normalize(aligned, condition):
    """Normalised ``(n, V)`` variables and the training-split bounds used."""
    raw = aligned.variables(condition)
    names = ("contamination",) + (FEATURE_NAMES if condition == "multivariate" else ())
    train = aligned.splits == "train"
    if not train.any():
        raise ValueError(f"{aligned.area}: no training weeks")
    bounds = MinMaxBounds.fit(raw[train], names)
    return bounds.transform(raw), bounds


def window_count(n, horizon):
    return max(n - (WINDOW - 1) - horizon, 0)


def segments(labels):
    """Maximal runs of equal labels as ``(label, start, stop)``."""
    out, start = [], 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append((labels[start], start, i))
            start = i
    return out


@dataclass
class WindowedDataset:
    area: str
    condition: str
    horizon: int
    X: np.ndarray  # (m, 12, V) normalised
    y: np.ndarray  # (m,) normalised
    split: np.ndarray  # (m,) split label of each window
    target_index: np.ndarray  # (m,) index of the target week in the aligned series
    bounds: MinMaxBounds = None

    def part(self, name):
        sel = self.split == name
        return self.X[sel], self.y[sel]

    def target_weeks(self, aligned, name):
        return aligned.weeks[self.target_index[self.split == name]]


def make_windows(values, labels, horizon, area="", condition="univariate", bounds=None):
    """12-step input windows with the target ``horizon`` steps after the last input.

    Windows are built inside each contiguous split segment, so a segment of
    length N yields N - 11 - horizon windows and no target crosses a split
    boundary. Contamination is variable 0 of ``values``.
    """
    if horizon not in HORIZONS:
        raise ValueError(f"horizon must be one of {HORIZONS}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    labels = np.asarray(labels)
    Xs, ys, ss, ts = [], [], [], []
    for label, a, b in segments(labels):
        m = window_count(b - a, horizon)
        if m == 0:
            warnings.warn(f"{area or 'series'}: {label} segment of {b - a} weeks too short for h={horizon}")
            continue
        starts = np.arange(a, a + m)
        Xs.append(np.stack([values[s : s + WINDOW] for s in starts]))
        targets = starts + WINDOW - 1 + horizon
        ys.append(values[targets, 0])
        ss.append(np.full(m, label))
        ts.append(targets)
    V = values.shape[1]
    if not Xs:
        return WindowedDataset(
            area, condition, horizon, np.empty((0, WINDOW, V)), np.empty(0), np.empty(0, str), np.empty(0, int), bounds
        )
    return WindowedDataset(
        area, condition, horizon, np.concatenate(Xs), np.concatenate(ys), np.concatenate(ss), np.concatenate(ts), bounds
    )


def build_dataset(aligned, condition, horizon):
    values, bounds = minmax_normalize(aligned, condition)
    return make_windows(values, aligned.splits, horizon, aligned.area, condition, bounds)


def build_forecaster(family, layer_dim, n_vars, seed=0):
    """Untrained network mapping a (12, n_vars) window to one value."""
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    if layer_dim not in LAYER_DIMS:
        raise ValueError(f"layer_dim must be one of {LAYER_DIMS}, got {layer_dim!r}")
    if family == "MLP":
        layers = [nn.Flatten(), nn.Dense(layer_dim, "relu"), nn.Dense(1, "sigmoid")]
    elif family == "CNN":
        # pointwise temporal conv: each step's variables mixed independently
        layers = [
            nn.Reshape((WINDOW, 1, n_vars)),
            nn.Conv2D(layer_dim, 1, "leaky-relu"),
            nn.Flatten(),
            nn.Dense(1, "sigmoid"),
        ]
    else:
        layers = [nn.LSTM(layer_dim, stateful=True), nn.Dense(1, "elu")]
    return nn.Sequential(layers, (WINDOW, n_vars), seed=seed)


FAMILY_TRAINING = {
    "MLP": {"optimizer": "adam", "batch_size": 8},
    "CNN": {"optimizer": "adam", "batch_size": 8},
    "LSTM": {"optimizer": "rmsprop", "batch_size": 1},
}


class Forecaster(BaseEstimator, RegressorMixin):
    """One network family at one layer dimension, trained with MAE.

    ``fit(X, y, eval_set=(X_val, y_val))`` early-stops on validation MAE;
    without ``eval_set`` it trains for ``max_epochs``. ``predict`` returns
    the raw normalised output.
    """

    def __init__(self, family="MLP", layer_dim=12, learning_rate=0.001, max_epochs=1000, patience=100, seed=0):
        self.family = family
        self.layer_dim = layer_dim
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed

    def _check_X(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != WINDOW:
            raise ValueError(f"windows must have shape (m, {WINDOW}, V), got {X.shape}")
        if hasattr(self, "n_vars_") and X.shape[2] != self.n_vars_:
            raise ValueError(f"windows have {X.shape[2]} variables, model expects {self.n_vars_}")
        if not np.isfinite(X).all():
            raise ValueError("windows contain non-finite values")
        return X

    def fit(self, X, y, eval_set=None):
        X = self._check_X(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        if len(X) == 0 or len(X) != len(y):
            raise ValueError("training windows and targets must be non-empty and equal in length")
        self.n_vars_ = X.shape[2]
        self.model_ = build_forecaster(self.family, self.layer_dim, self.n_vars_, seed=self.seed)
        rules = FAMILY_TRAINING[self.family]
        optimizer = nn.optim.get(rules["optimizer"], learning_rate=self.learning_rate)
        config = nn.TrainConfig(
            batch_size=rules["batch_size"],
            max_epochs=self.max_epochs,
            patience=self.patience,
            loss="mae",
            seed=self.seed,
        )
        if eval_set is None:
            losses = nn.train_fixed_epochs(self.model_, (X, y), self.max_epochs, config, optimizer)
            self.history_ = nn.History(losses, [np.nan] * len(losses), best_epoch=len(losses))
        else:
            Xv = self._check_X(eval_set[0])
            yv = np.asarray(eval_set[1], dtype=np.float64).reshape(-1, 1)
            self.history_ = nn.fit(self.model_, (X, y), (Xv, yv), config, optimizer)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = self._check_X(X)
        return self.model_.predict(X)[:, 0].astype(np.float64)

    def score(self, X, y):
        """Negative MAE on the normalised scale."""
        return -float(np.mean(np.abs(self.predict(X) - np.asarray(y).ravel())))


@dataclass
class ForecastModelSpec:
    area: str
    condition: str
    horizon: int
    family: str
    layer_dim: int
    val_mae: float
    model: Forecaster
    bounds: MinMaxBounds
    candidates: list = field(default_factory=list)  # (family, layer_dim, val_mae)

    def predict(self, windows):
        """Concentrations (ug/kg) from normalised windows; output clipped to [0, 1] first."""
        return self.bounds.inverse_target(np.clip(self.model.predict(windows), 0.0, 1.0))


def _candidate_key(result):
    family, dim, mae = result
    return (mae, dim, FAMILIES.index(family))


def train_and_select(dataset, families=FAMILIES, layer_dims=LAYER_DIMS, **params):
    """Train every (family, layer_dim) candidate; keep the lowest validation MAE.

    Ties go to the smaller layer dimension, then to MLP before CNN before LSTM.
    """
    X, y = dataset.part("train")
    Xv, yv = dataset.part("validation")
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError(f"{dataset.area} h={dataset.horizon}: empty training or validation windows")
    results, models, failures = [], {}, []
    for family in families:
        for dim in layer_dims:
            est = Forecaster(family, dim, **params)
            try:
                est.fit(X, y, eval_set=(Xv, yv))
            except nn.TrainingDivergedError as err:
                log.warning("%s %s/%d diverged: %s", dataset.area, family, dim, err)
                failures.append((family, dim))
                continue
            mae = float(np.mean(np.abs(est.predict(Xv) - yv)))
            results.append((family, dim, mae))
            models[family, dim] = est
    if not results:
        raise nn.TrainingDivergedError(0, f"{dataset.area} h={dataset.horizon}: every candidate diverged")
    family, dim, mae = min(results, key=_candidate_key)
    return ForecastModelSpec(
        dataset.area,
        dataset.condition,
        dataset.horizon,
        family,
        dim,
        mae,
        models[family, dim],
        dataset.bounds,
        results,
    )


def holdout_predictions(spec, dataset):
    """``(observed, predicted)`` concentrations on the test windows."""
    X, y = dataset.part("test")
    if len(X) == 0:
        raise ValueError(f"{dataset.area} h={dataset.horizon}: no test windows")
    return dataset.bounds.inverse_target(y), spec.predict(X)


REGISTRY_HEADER = ["area", "condition", "horizon", "family", "layer_dim", "val_mae"]


def write_registry(specs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGISTRY_HEADER)
        for s in sorted(specs, key=lambda s: (s.area, CONDITIONS.index(s.condition), s.horizon)):
            w.writerow([s.area, s.condition, s.horizon, s.family, s.layer_dim, repr(float(s.val_mae))])


def read_registry(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REGISTRY_HEADER:
            raise ValueError(f"{path}: header must be {','.join(REGISTRY_HEADER)}")
        return [
            {**row, "horizon": int(row["horizon"]), "layer_dim": int(row["layer_dim"]), "val_mae": float(row["val_mae"])}
            for row in reader
        ]
