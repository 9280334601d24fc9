"""Satellite frames: coverage-based selection, validity flags and patch extraction.

Frames live on a north-up grid in a local metric plane (x east, y north,
metres). Pixel ``(r, c)`` spans ``x in [ox + c*px, ox + (c+1)*px)`` and
``y in (oy - (r+1)*px, oy - r*px]``.
"""

import csv
import datetime as dt
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon, box

PIXEL_SIZE = 300.0
PATCH_SIZE = 64
# site sits on the eastern edge, 31 rows below the patch top
SITE_ROW = 31
SITE_COL = PATCH_SIZE - 1
CHANNELS = ("CHL_OC4ME", "CHL_NN", "PAR")

FLAG_CLOUD = 1 << 0
FLAG_LAND = 1 << 1
FLAG_RANGE_FAIL = 1 << 2
FLAG_COASTLINE = 1 << 3  # informational only
INVALID_BITS = FLAG_CLOUD | FLAG_LAND | FLAG_RANGE_FAIL

SATELLITES = ("3A", "3B")


@dataclass(frozen=True)
class LocalProjection:
    """Equirectangular lat/lon -> metres around a reference point."""

    lat0: float = 39.5
    lon0: float = -9.0
    radius: float = 6371008.8

    def to_xy(self, lat, lon):
        x = self.radius * math.radians(lon - self.lon0) * math.cos(math.radians(self.lat0))
        y = self.radius * math.radians(lat - self.lat0)
        return x, y

    def to_latlon(self, x, y):
        lat = self.lat0 + math.degrees(y / self.radius)
        lon = self.lon0 + math.degrees(x / (self.radius * math.cos(math.radians(self.lat0))))
        return lat, lon


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    pixel_size: float = PIXEL_SIZE

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive (geotransform not invertible)")

    def pixel_of(self, x, y):
        """Row/column of the pixel containing (nearest to) point ``(x, y)``."""
        col = math.floor((x - self.origin_x) / self.pixel_size)
        row = math.floor((self.origin_y - y) / self.pixel_size)
        return row, col

    def center_of(self, row, col):
        return (
            self.origin_x + (col + 0.5) * self.pixel_size,
            self.origin_y - (row + 0.5) * self.pixel_size,
        )


@dataclass
class Frame:
    satellite: str
    date: dt.date
    transform: GeoTransform
    channels: np.ndarray  # (rows, cols, 3) float32
    flags: np.ndarray | None = None  # (rows, cols) integer bitfield

    def __post_init__(self):
        if self.satellite not in SATELLITES:
            raise ValueError(f"satellite must be one of {SATELLITES}, got {self.satellite!r}")
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3 or self.channels.shape[2] != len(CHANNELS):
            raise ValueError(f"channels must be (rows, cols, {len(CHANNELS)}), got {self.channels.shape}")
        if self.flags is not None:
            self.flags = np.asarray(self.flags)
            if self.flags.shape != self.channels.shape[:2]:
                raise ValueError("flag raster and channel rasters differ in size")

    @property
    def shape(self):
        return self.channels.shape[:2]

    @property
    def footprint(self):
        t = self.transform
        rows, cols = self.shape
        return box(
            t.origin_x,
            t.origin_y - rows * t.pixel_size,
            t.origin_x + cols * t.pixel_size,
            t.origin_y,
        )


def target_area(vertices_latlon, projection=LocalProjection()):
    """Polygon in the frame plane from ``[(lat, lon), ...]`` vertices."""
    return Polygon([projection.to_xy(lat, lon) for lat, lon in vertices_latlon])


def frame_coverage(frame, area):
    """Fraction of ``area`` (a shapely polygon) covered by the frame footprint."""
    if area.area <= 0:
        raise ValueError("target area has zero extent")
    return frame.footprint.intersection(area).area / area.area


def _abuts(upper, lower):
    tu, tl = upper.transform, lower.transform
    tol = 1e-6 * tu.pixel_size
    return (
        math.isclose(tu.pixel_size, tl.pixel_size)
        and math.isclose(tu.origin_x, tl.origin_x, abs_tol=tol)
        and upper.shape[1] == lower.shape[1]
        and math.isclose(tu.origin_y - upper.shape[0] * tu.pixel_size, tl.origin_y, abs_tol=tol)
    )


def _merge(upper, lower):
    if upper.flags is None or lower.flags is None:
        flags = None
    else:
        flags = np.vstack([upper.flags, lower.flags])
    return Frame(
        upper.satellite,
        upper.date,
        upper.transform,
        np.vstack([upper.channels, lower.channels]),
        flags,
    )


def merge_contiguous(frames):
    """Concatenate rows of frames whose row ranges abut, north to south."""
    ordered = sorted(frames, key=lambda f: (-f.transform.origin_y, f.transform.origin_x))
    merged = []
    for f in ordered:
        if merged and _abuts(merged[-1], f):
            merged[-1] = _merge(merged[-1], f)
        else:
            merged.append(f)
    return merged


@dataclass
class FrameSelection:
    frames: list = field(default_factory=list)  # selected (merged) frames
    satellite: str | None = None
    coverage: dict = field(default_factory=dict)  # satellite -> total surviving coverage


def select_frames(frames, area, min_frame_coverage=0.015, min_satellite_coverage=0.20):
    """Pick the frames of one acquisition date that best cover ``area``.

    1. frames covering less than ``min_frame_coverage`` are dropped;
    2. a satellite whose remaining frames sum to less than
       ``min_satellite_coverage`` is dropped entirely;
    3. the satellite with the largest total coverage wins (3A on ties) and
       its contiguous frames are merged.
    """
    totals, kept = {}, {}
    for f in frames:
        cov = frame_coverage(f, area)
        if cov < min_frame_coverage:
            continue
        kept.setdefault(f.satellite, []).append(f)
        totals[f.satellite] = totals.get(f.satellite, 0.0) + cov
    totals = {s: c for s, c in totals.items() if c >= min_satellite_coverage}
    if not totals:
        return FrameSelection(coverage=totals)
    best = None
    for sat in sorted(totals):
        if best is None or totals[sat] > totals[best]:
            best = sat
    return FrameSelection(merge_contiguous(kept[best]), best, totals)


def compute_valid_mask(flags, channels, invalid_bits=INVALID_BITS):
    """Boolean raster: no invalid flag bit set and all channel values finite."""
    channels = np.asarray(channels)
    if flags is None:
        warnings.warn("no flag raster; every pixel treated as invalid", stacklevel=2)
        return np.zeros(channels.shape[:2], dtype=bool)
    return ((np.asarray(flags) & invalid_bits) == 0) & np.isfinite(channels).all(axis=-1)


@dataclass
class SatellitePatch:
    area: str
    date: dt.date
    pixels: np.ndarray  # (64, 64, 3) float32, raw product values
    valid_mask: np.ndarray  # (64, 64) bool

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.pixels.shape != (PATCH_SIZE, PATCH_SIZE, len(CHANNELS)):
            raise ValueError(f"patch pixels must be 64x64x3, got {self.pixels.shape}")
        if self.valid_mask.shape != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"valid mask must be 64x64, got {self.valid_mask.shape}")

    @property
    def valid_fraction(self):
        return float(self.valid_mask.mean())

    def masked_pixels(self):
        """Pixels as float64 with NaN wherever the mask is invalid."""
        out = self.pixels.astype(np.float64)
        out[~self.valid_mask] = np.nan
        return out


class PatchDiscarded(Exception):
    """Raised by :func:`extract_patch`; ``reason`` is a short code."""

    def __init__(self, reason, detail=""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


def patch_window(row, col):
    """Row and column slices of the patch whose east-edge site pixel is ``(row, col)``."""
    top = row - SITE_ROW
    left = col - SITE_COL
    return slice(top, top + PATCH_SIZE), slice(left, left + PATCH_SIZE)


def extract_patch(
    frame,
    lat,
    lon,
    area_id,
    projection=LocalProjection(),
    min_valid_fraction=0.10,
    invalid_bits=INVALID_BITS,
):
    """Cut the 64x64 patch with the site at the centre of its eastern edge.

    No resampling: the patch is a direct slice of the frame grid. Raises
    :class:`PatchDiscarded` when the site is off-frame, the frame lacks
    room around it, or the valid share is ``<= min_valid_fraction``.
    """
    x, y = projection.to_xy(lat, lon)
    row, col = frame.transform.pixel_of(x, y)
    rows, cols = frame.shape
    if not (0 <= row < rows and 0 <= col < cols):
        raise PatchDiscarded("outside-frame", f"site pixel ({row}, {col}) not in {rows}x{cols} frame")
    rs, cs = patch_window(row, col)
    if rs.start < 0 or rs.stop > rows or cs.start < 0:
        raise PatchDiscarded("insufficient-extent", f"site pixel ({row}, {col}) too close to the frame edge")
    pixels = frame.channels[rs, cs]
    flags = None if frame.flags is None else frame.flags[rs, cs]
    mask = compute_valid_mask(flags, pixels, invalid_bits)
    # count / 4096 is exact in binary, so the comparison is exact at the boundary
    fraction = mask.sum() / mask.size
    if not fraction > min_valid_fraction:
        raise PatchDiscarded("too-few-valid", f"valid fraction {fraction:.4f}")
    return SatellitePatch(area_id, frame.date, pixels.copy(), mask)


def save_frames(frames, path):
    """Store the frames of one or more dates in a single ``.npz`` file."""
    arrays = {
        "satellite": np.array([f.satellite for f in frames]),
        "date": np.array([f.date.isoformat() for f in frames]),
        "transform": np.array(
            [(f.transform.origin_x, f.transform.origin_y, f.transform.pixel_size) for f in frames],
            dtype=np.float64,
        ).reshape(len(frames), 3),
    }
    for i, f in enumerate(frames):
        arrays[f"channels_{i}"] = f.channels
        if f.flags is not None:
            arrays[f"flags_{i}"] = f.flags
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_frames(path):
    with np.load(path) as data:
        frames = []
        for i, sat in enumerate(data["satellite"]):
            ox, oy, px = data["transform"][i]
            frames.append(
                Frame(
                    str(sat),
                    dt.date.fromisoformat(str(data["date"][i])),
                    GeoTransform(float(ox), float(oy), float(px)),
                    data[f"channels_{i}"],
                    data[f"flags_{i}"] if f"flags_{i}" in data else None,
                )
            )
    return frames


SITES_HEADER = ["area", "lat", "lon"]


def write_sites_csv(sites, path):
    """``sites`` maps area id -> (lat, lon) in degrees."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SITES_HEADER)
        for area, (lat, lon) in sites.items():
            w.writerow([area, repr(float(lat)), repr(float(lon))])


def read_sites_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SITES_HEADER:
            raise ValueError(f"{path}: header must be {','.join(SITES_HEADER)}")
        return {row[0]: (float(row[1]), float(row[2])) for row in reader if row}
