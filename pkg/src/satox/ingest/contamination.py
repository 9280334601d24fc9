"""Contamination records and weekly per-area series."""

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CSV_HEADER = ["area", "date", "species", "toxin_ug_kg"]
REGULATORY_LIMIT = 160.0
MAX_MALFORMED_SHARE = 0.10


class ContaminationFormatError(ValueError):
    def __init__(self, message, rows=()):
        self.rows = list(rows)
        super().__init__(message)


class EmptySeriesError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ContaminationRecord:
    area: str
    date: dt.date
    species: str
    level: float | None  # ug OA equiv./kg; None when not reported


def _parse_row(row):
    if len(row) != 4:
        raise ValueError(f"expected 4 fields, got {len(row)}")
    area, date_s, species, level_s = (f.strip() for f in row)
    if not area:
        raise ValueError("empty area")
    date = dt.date.fromisoformat(date_s)
    if level_s == "":
        level = None
    else:
        level = float(level_s)
        if not math.isfinite(level) or level < 0:
            raise ValueError(f"invalid toxin level {level_s!r}")
    return ContaminationRecord(area, date, species, level)


def parse_contamination_csv(path, start=None, end=None):
    """Read ``area,date,species,toxin_ug_kg`` rows.

    Returns ``(records, malformed)``; ``malformed`` lists ``(line_number, reason)``.
    Records outside ``[start, end]`` are dropped silently. Raises
    :class:`ContaminationFormatError` on a bad header or when more than 10%
    of data rows are malformed.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ContaminationFormatError(f"{path}: header must be {','.join(CSV_HEADER)}")
        records, malformed, n_rows = [], [], 0
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            n_rows += 1
            try:
                rec = _parse_row(row)
            except ValueError as err:
                malformed.append((line_no, str(err)))
                continue
            if (start and rec.date < start) or (end and rec.date > end):
                continue
            records.append(rec)
    if n_rows and len(malformed) > MAX_MALFORMED_SHARE * n_rows:
        lines = ", ".join(str(n) for n, _ in malformed)
        raise ContaminationFormatError(
            f"{path}: {len(malformed)} of {n_rows} rows malformed (lines {lines})", malformed
        )
    for line_no, reason in malformed:
        log.warning("%s:%d skipped: %s", path, line_no, reason)
    records.sort(key=lambda r: (r.area, r.date, r.species))
    return records, malformed


def write_contamination_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            level = "" if r.level is None else repr(float(r.level))
            writer.writerow([r.area, r.date.isoformat(), r.species, level])


def iso_monday(date):
    return date - dt.timedelta(days=date.weekday())


@dataclass
class AreaSeries:
    """One slot per ISO week. ``values`` is NaN where nothing was measured."""

    area: str
    week_index: np.ndarray  # consecutive ints counted from the study-start week
    weeks: np.ndarray  # datetime64[D], Monday of each week
    values: np.ndarray
    measured: np.ndarray  # bool; False marks missing or forward-filled slots
    ref_dates: np.ndarray = field(default=None)  # datetime64[D] a slot's values are "as of"

    def __post_init__(self):
        if self.ref_dates is None:
            self.ref_dates = self.weeks + np.timedelta64(6, "D")
        n = len(self.values)
        if not all(len(a) == n for a in (self.week_index, self.weeks, self.measured, self.ref_dates)):
            raise ValueError("AreaSeries arrays differ in length")

    def __len__(self):
        return len(self.values)

    @property
    def missing(self):
        return np.isnan(self.values)

    @property
    def provenance(self):
        out = np.where(self.measured, "measured", "forward-filled").astype(object)
        out[self.missing] = "missing"
        return out

    @property
    def iso_years(self):
        return np.array([d.astype(dt.date).isocalendar()[0] for d in self.weeks])


def build_weekly_series(records, area, start, end):
    """Weekly maximum level over all species for ``area`` between ``start`` and ``end``."""
    area_records = [r for r in records if r.area == area]
    if not area_records:
        raise EmptySeriesError(f"no contamination records for area {area!r}")
    first = iso_monday(start)
    n_weeks = (iso_monday(end) - first).days // 7 + 1
    values = np.full(n_weeks, np.nan)
    weeks = np.array([first + dt.timedelta(weeks=i) for i in range(n_weeks)], dtype="datetime64[D]")
    # a measured slot is "as of" its latest measurement; an empty one as of its Sunday
    ref_dates = weeks + np.timedelta64(6, "D")
    latest = [None] * n_weeks
    for r in area_records:
        if r.level is None or r.date < start or r.date > end:
            continue
        i = (iso_monday(r.date) - first).days // 7
        if np.isnan(values[i]) or r.level > values[i]:
            values[i] = r.level
        if latest[i] is None or r.date > latest[i]:
            latest[i] = r.date
    for i, d in enumerate(latest):
        if d is not None:
            ref_dates[i] = np.datetime64(d, "D")
    measured = ~np.isnan(values)
    return AreaSeries(area, np.arange(n_weeks), weeks, values, measured, ref_dates)


def impute_forward_fill(series):
    """Carry the last measured value into missing weeks; trim leading missing weeks."""
    measured_idx = np.flatnonzero(series.measured & ~np.isnan(series.values))
    if measured_idx.size == 0:
        raise EmptySeriesError(f"area {series.area!r} has no measured weeks")
    start = measured_idx[0]
    values = series.values[start:].copy()
    measured = series.measured[start:].copy()
    last = values[0]
    for i in range(len(values)):
        if np.isnan(values[i]):
            values[i] = last
        else:
            last = values[i]
    return AreaSeries(
        series.area,
        series.week_index[start:].copy(),
        series.weeks[start:].copy(),
        values,
        measured,
        series.ref_dates[start:].copy(),
    )


def series_summary(series, limit=REGULATORY_LIMIT):
    """Per-area counts: measured and missing weeks, and measured weeks below/at-or-above ``limit``."""
    vals = series.values[series.measured]
    cont = int((vals >= limit).sum())
    n = int(series.measured.sum())
    return {
        "area": series.area,
        "measured": n,
        "missing": int(len(series) - n),
        "no_cont": n - cont,
        "cont": cont,
        "cont_share": cont / n if n else 0.0,
    }
