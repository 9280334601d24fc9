"""Synthetic stand-ins for every pipeline input.

A low-dimensional AR(1) "ocean state" drives two things: the amplitudes of
Gaussian bumps in the bio-optical channels, and (after a configurable lag)
the toxin level of each production area. Frames, contamination CSVs and
ready-made corpora for the forecasting checks are all derived from it.
"""

import datetime as dt
import os
from dataclasses import dataclass

import numpy as np

from .autoencoder import LatentFeatures
from .ingest.contamination import AreaSeries, ContaminationRecord, iso_monday, write_contamination_csv
from .ingest.frames import (
    FLAG_CLOUD,
    FLAG_COASTLINE,
    FLAG_LAND,
    FLAG_RANGE_FAIL,
    PATCH_SIZE,
    PIXEL_SIZE,
    SITE_ROW,
    Frame,
    GeoTransform,
    LocalProjection,
    save_frames,
    write_sites_csv,
)

AREAS = ("L1", "L2", "L5B", "L6", "RIAV1", "RIAV2", "RIAV3", "RIAV4")
STUDY_START = dt.date(2016, 4, 26)
STUDY_END = dt.date(2022, 12, 31)
STATE_DIM = 3
BUMPS_PER_CHANNEL = 3

# channel value = offset + scale * field; keeps CHL and PAR in plausible units
CHANNEL_OFFSET = np.array([1.0, 0.8, 35.0])
CHANNEL_SCALE = np.array([3.0, 2.5, 8.0])


def ocean_state(n, rng, dim=STATE_DIM, phi=0.8):
    """Stationary AR(1) process with unit marginal variance, shape ``(n, dim)``."""
    if not 0 <= phi < 1:
        raise ValueError("phi must lie in [0, 1)")
    s = np.empty((n, dim))
    innov = np.sqrt(1 - phi**2)
    prev = rng.standard_normal(dim)
    for t in range(n):
        prev = phi * prev + innov * rng.standard_normal(dim)
        s[t] = prev
    return s


@dataclass
class BumpField:
    """Per channel, ``BUMPS_PER_CHANNEL`` Gaussian bumps with state-driven amplitudes.

    Coordinates are (row, col) in pixels relative to the rendering grid.
    """

    centers: np.ndarray  # (3, B, 2)
    widths: np.ndarray  # (3, B)
    base: np.ndarray  # (3, B)
    loadings: np.ndarray  # (3, B, dim)

    @classmethod
    def random(cls, rng, dim=STATE_DIM, extent=(PATCH_SIZE, PATCH_SIZE), origin=(0, 0)):
        shape = (3, BUMPS_PER_CHANNEL)
        centers = np.stack(
            [
                origin[0] + rng.uniform(0.1, 0.9, shape) * extent[0],
                origin[1] + rng.uniform(0.1, 0.9, shape) * extent[1],
            ],
            axis=-1,
        )
        return cls(
            centers=centers,
            widths=rng.uniform(6.0, 16.0, shape),
            base=rng.uniform(0.2, 0.6, shape),
            loadings=rng.normal(0.0, 0.25, shape + (dim,)),
        )

    def amplitudes(self, state):
        return self.base + self.loadings @ np.asarray(state)

    def render(self, states, shape):
        """Field values ``(n, rows, cols, 3)`` for ``states`` of shape ``(n, dim)``."""
        rows, cols = shape
        r = np.arange(rows)[:, None, None]
        c = np.arange(cols)[None, :, None]
        states = np.atleast_2d(states)
        out = np.zeros((len(states), rows, cols, 3))
        for ch in range(3):
            for b in range(self.widths.shape[1]):
                cr, cc = self.centers[ch, b]
                g = np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * self.widths[ch, b] ** 2))[..., 0]
                amp = self.base[ch, b] + states @ self.loadings[ch, b]
                out[..., ch] += amp[:, None, None] * g
        return out


def to_channels(field):
    return CHANNEL_OFFSET + CHANNEL_SCALE * field


def random_invalid_mask(n, rng, fraction, shape=(PATCH_SIZE, PATCH_SIZE)):
    """Valid-pixel mask with each pixel independently invalid with probability ``fraction``."""
    return rng.random((n,) + tuple(shape)) >= fraction


def weekly_dates(n, end_of_training=dt.date(2020, 12, 31), n_validation=40):
    """``n`` weekly Mondays placed so that the last ``n_validation`` fall after ``end_of_training``."""
    first_val = iso_monday(end_of_training) + dt.timedelta(weeks=1)
    start = first_val - dt.timedelta(weeks=n - n_validation)
    return [start + dt.timedelta(weeks=i) for i in range(n)]


@dataclass
class FieldDataset:
    X: np.ndarray  # (n, 64, 64, 3) with NaN at invalid pixels
    mask: np.ndarray  # (n, 64, 64) bool, True = valid
    dates: list
    states: np.ndarray


def smooth_field_dataset(n=200, seed=0, invalid_fraction=0.3, n_validation=40, noise=0.01):
    """Patches of smooth bump fields with random invalid pixels, dated weekly.

    The last ``n_validation`` images fall in 2021 so a chronological
    train/validation split is available.
    """
    rng = np.random.default_rng(seed)
    states = ocean_state(n, rng)
    field = BumpField.random(rng).render(states, (PATCH_SIZE, PATCH_SIZE))
    field += noise * rng.standard_normal(field.shape)
    X = to_channels(field)
    mask = random_invalid_mask(n, rng, invalid_fraction)
    X[~mask] = np.nan
    return FieldDataset(X, mask, weekly_dates(n, n_validation=n_validation), states)


def _series(area, values, start):
    n = len(values)
    weeks = np.array([iso_monday(start) + dt.timedelta(weeks=i) for i in range(n)], dtype="datetime64[D]")
    return AreaSeries(area, np.arange(n), weeks, np.asarray(values, float), np.ones(n, bool))


def _features(area, series, latents):
    return [
        LatentFeatures(area, (w + np.timedelta64(2, "D")).astype(dt.date), z)
        for w, z in zip(series.weeks, latents)
    ]


def lead_lag_corpus(seed=0, n_weeks=None, start=STUDY_START, end=STUDY_END, lag=2, noise=0.05, feature_noise=0.05):
    """Toxin level at week ``t`` is a function of the latent signal observed at ``t - lag``.

    The signal is i.i.d. over weeks, so past toxin levels carry no
    information about the level ``lag`` or more weeks ahead. Returns
    ``(series, features)``; features are noisy mixtures of the signal.
    """
    rng = np.random.default_rng(seed)
    if n_weeks is None:
        n_weeks = (iso_monday(end) - iso_monday(start)).days // 7 + 1
    s = rng.standard_normal((n_weeks, 4))
    w = rng.normal(size=4)
    w /= np.linalg.norm(w)
    drive = np.full(n_weeks, 0.0)
    drive[lag:] = s[:-lag] @ w if lag else s @ w
    level = 40.0 * np.exp(1.0 * drive + noise * rng.standard_normal(n_weeks))
    mix = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    latents = s @ mix + feature_noise * rng.standard_normal((n_weeks, 4))
    series = _series("SYN", level[lag:], start + dt.timedelta(weeks=lag))
    return series, _features("SYN", series, latents[lag:])


def permute_features(features, seed=0):
    """Same feature vectors, randomly reassigned to dates."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(features))
    return [LatentFeatures(f.area, f.date, features[j].values) for f, j in zip(features, order)]


def ar1_series(seed=0, n_weeks=None, start=STUDY_START, end=STUDY_END, phi=0.9, noise=0.3, level=60.0):
    """Log-AR(1) toxin series plus measurement noise."""
    rng = np.random.default_rng(seed)
    if n_weeks is None:
        n_weeks = (iso_monday(end) - iso_monday(start)).days // 7 + 1
    x = ocean_state(n_weeks, rng, dim=1, phi=phi)[:, 0]
    values = level * np.exp(x + noise * rng.standard_normal(n_weeks))
    return _series("AR1", values, start)


# --- full pipeline inputs -------------------------------------------------

SITE_SPACING_ROWS = 24
LAND_COLS = 8
MARGIN = 8


@dataclass
class Region:
    """Frame grid shared by all synthetic acquisitions."""

    rows: int
    cols: int
    transform: GeoTransform
    sites: dict  # area -> (row, col)


def make_region(areas, projection=LocalProjection()):
    top = MARGIN + SITE_ROW
    sites = {a: (top + i * SITE_SPACING_ROWS, MARGIN + PATCH_SIZE - 1) for i, a in enumerate(areas)}
    rows = top + (len(areas) - 1) * SITE_SPACING_ROWS + (PATCH_SIZE - SITE_ROW) + MARGIN
    cols = MARGIN + PATCH_SIZE + LAND_COLS
    # anchor the grid so the reference point sits at the top-left corner
    x0, y0 = projection.to_xy(projection.lat0, projection.lon0)
    return Region(rows, cols, GeoTransform(x0, y0, PIXEL_SIZE), sites)


def site_latlon(region, area, projection=LocalProjection()):
    r, c = region.sites[area]
    return projection.to_latlon(*region.transform.center_of(r, c))


def write_region_sites(region, path, projection=LocalProjection()):
    write_sites_csv({a: site_latlon(region, a, projection) for a in region.sites}, path)


def _cloud_field(rng, shape, cover):
    """Boolean cloud raster from thresholded smooth noise with about ``cover`` share set."""
    if cover <= 0:
        return np.zeros(shape, bool)
    coarse = rng.standard_normal((shape[0] // 16 + 2, shape[1] // 16 + 2))
    fine = np.kron(coarse, np.ones((16, 16)))[: shape[0], : shape[1]]
    return fine > np.quantile(fine, 1 - cover)


def _frames_for_date(rng, region, field, date):
    frames = []
    for sat in ("3A", "3B"):
        if rng.random() < 0.15:
            continue  # no pass over the region
        # swath edge: columns west of it are outside the frame
        first_col = int(rng.choice([0, 0, 0, rng.integers(0, region.cols // 2)]))
        channels = to_channels(field[:, first_col:] + 0.005 * rng.standard_normal(field[:, first_col:].shape))
        flags = np.zeros(channels.shape[:2], np.uint8)
        flags[:, -LAND_COLS:] |= FLAG_LAND
        flags[:, -LAND_COLS - 1] |= FLAG_COASTLINE
        flags[_cloud_field(rng, flags.shape, rng.choice([0.0, 0.2, 0.5, 0.95]))] |= FLAG_CLOUD
        flags[rng.random(flags.shape) < 0.002] |= FLAG_RANGE_FAIL
        channels[rng.random(flags.shape) < 0.001] = np.nan
        t = GeoTransform(region.transform.origin_x + first_col * PIXEL_SIZE, region.transform.origin_y, PIXEL_SIZE)
        if rng.random() < 0.3:
            cut = int(rng.integers(10, region.rows - 10))
            t2 = GeoTransform(t.origin_x, t.origin_y - cut * PIXEL_SIZE, PIXEL_SIZE)
            frames += [Frame(sat, date, t, channels[:cut], flags[:cut]), Frame(sat, date, t2, channels[cut:], flags[cut:])]
        else:
            frames.append(Frame(sat, date, t, channels, flags))
    return frames


def toxin_levels(states, rng, area_index, lag):
    """Weekly toxin level (ug/kg) per area driven by the state ``lag`` weeks earlier."""
    w = rng.normal(size=states.shape[1])
    w /= np.linalg.norm(w)
    drive = np.zeros(len(states))
    drive[lag:] = states[: len(states) - lag] @ w if lag else states @ w
    base = 30.0 + 5.0 * area_index
    return base * np.exp(1.1 * drive + 0.15 * rng.standard_normal(len(states)))


def generate_inputs(out_dir, areas=AREAS, start=STUDY_START, end=STUDY_END, seed=0, lag=2, missing_share=0.01):
    """Write ``contamination.csv``, ``sites.csv`` and ``frames/<date>.npz`` under ``out_dir``."""
    rng = np.random.default_rng(seed)
    areas = list(areas)
    region = make_region(areas)
    first = iso_monday(start)
    n_weeks = (iso_monday(end) - first).days // 7 + 1
    states = ocean_state(n_weeks, rng)
    field_model = _region_field(rng, region)

    records = []
    for k, area in enumerate(areas):
        levels = toxin_levels(states, rng, k, lag)
        for i in range(n_weeks):
            monday = first + dt.timedelta(weeks=i)
            day = monday + dt.timedelta(days=int(rng.integers(1, 4)))
            if day < start or day > end or rng.random() < missing_share:
                continue
            records.append(ContaminationRecord(area, day, "Mytilus galloprovincialis", round(float(levels[i]), 3)))
            if rng.random() < 0.3:
                clam = round(float(levels[i] * rng.uniform(0.2, 0.8)), 3)
                records.append(ContaminationRecord(area, day, "Cerastoderma edule", clam))
    records.sort(key=lambda r: (r.area, r.date, r.species))

    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    write_contamination_csv(records, os.path.join(out_dir, "contamination.csv"))
    write_region_sites(region, os.path.join(out_dir, "sites.csv"))
    for i in range(n_weeks):
        date = first + dt.timedelta(weeks=i, days=int(rng.integers(0, 3)))
        if date < start or date > end:
            continue
        field = field_model.render(states[i : i + 1], (region.rows, region.cols))[0]
        frames = _frames_for_date(rng, region, field, date)
        if frames:
            save_frames(frames, os.path.join(out_dir, "frames", f"{date.isoformat()}.npz"))
    return region


def _region_field(rng, region):
    parts = [
        BumpField.random(rng, origin=(r - SITE_ROW, c - PATCH_SIZE + 1)) for r, c in region.sites.values()
    ]
    return BumpField(
        centers=np.concatenate([p.centers for p in parts], axis=1),
        widths=np.concatenate([p.widths for p in parts], axis=1),
        base=np.concatenate([p.base for p in parts], axis=1),
        loadings=np.concatenate([p.loadings for p in parts], axis=1),
    )
