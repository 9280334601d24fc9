"""Error metrics, regulatory-limit confusion counts, summary tables and prediction plots."""

import csv
import datetime as dt
import io
from dataclasses import dataclass

import numpy as np

from .ingest.contamination import REGULATORY_LIMIT


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.size} observed vs {y_hat.size} predicted")
    if y.size == 0:
        raise ValueError("metrics need at least one value")
    return y, y_hat


def mae(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def rmse(y, y_hat):
    y, y_hat = _pair(y, y_hat)
    err = np.abs(y - y_hat)
    # scaled so squaring neither underflows tiny errors nor overflows huge ones
    scale = err.max()
    if scale == 0 or not np.isfinite(scale):
        return float(np.sqrt(np.mean(err**2)))
    return float(scale * np.sqrt(np.mean((err / scale) ** 2)))


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.total


def confusion(y, y_hat, limit=REGULATORY_LIMIT):
    """Counts with "contaminated" meaning a value at or above ``limit``."""
    y, y_hat = _pair(y, y_hat)
    actual, predicted = y >= limit, y_hat >= limit
    return Confusion(
        tp=int(np.sum(actual & predicted)),
        tn=int(np.sum(~actual & ~predicted)),
        fp=int(np.sum(~actual & predicted)),
        fn=int(np.sum(actual & ~predicted)),
    )


def threshold_accuracy(y, y_hat, limit=REGULATORY_LIMIT):
    """``(accuracy, Confusion)`` of above/below-limit classification."""
    c = confusion(y, y_hat, limit)
    return c.accuracy, c


@dataclass(frozen=True)
class EvalReport:
    area: str
    condition: str
    horizon: int
    family: str
    mae: float
    rmse: float
    accuracy: float
    confusion: Confusion

    @classmethod
    def from_predictions(cls, area, condition, horizon, family, y, y_hat, limit=REGULATORY_LIMIT):
        acc, conf = threshold_accuracy(y, y_hat, limit)
        return cls(area, condition, horizon, family, mae(y, y_hat), rmse(y, y_hat), acc, conf)


def format_number(x):
    """Shortest round-tripping decimal, without a trailing ``.0``."""
    return np.format_float_positional(float(x), trim="-")


SUMMARY_HEADER = ["area", "condition", "horizon", "family", "mae", "rmse", "accuracy", "best_mae", "best_rmse", "best_accuracy"]
_BETTER = {"mae": np.less, "rmse": np.less, "accuracy": np.greater}


def best_flags(reports):
    """Per report, whether each metric strictly beats the other condition at the same area and horizon."""
    by_cell = {}
    for r in reports:
        by_cell.setdefault((r.area, r.horizon), []).append(r)
    flags = {}
    for cell in by_cell.values():
        for r in cell:
            rivals = [o for o in cell if o.condition != r.condition]
            flags[id(r)] = {
                m: bool(rivals) and all(_BETTER[m](getattr(r, m), getattr(o, m)) for o in rivals) for m in _BETTER
            }
    return flags


def _order(r):
    return (r.area, r.condition, r.horizon)


def summary_csv(reports):
    if not reports:
        raise ValueError("summary needs at least one report")
    flags = best_flags(reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in sorted(reports, key=_order):
        f = flags[id(r)]
        w.writerow(
            [r.area, r.condition, r.horizon, r.family, format_number(r.mae), format_number(r.rmse), format_number(r.accuracy)]
            + [int(f["mae"]), int(f["rmse"]), int(f["accuracy"])]
        )
    return buf.getvalue()


def write_summary(reports, path):
    with open(path, "w", newline="") as fh:
        fh.write(summary_csv(reports))


def confusion_csv(c):
    """2x2 table, rows = actual, columns = predicted, contaminated first."""
    return (
        "actual,predicted_contaminated,predicted_clean\n"
        f"contaminated,{c.tp},{c.fn}\n"
        f"clean,{c.fp},{c.tn}\n"
    )


def write_confusion(report, path):
    with open(path, "w", newline="") as fh:
        fh.write(confusion_csv(report.confusion))


def split_boundaries(years=(2021, 2022)):
    """First Monday of each ISO year that opens a new split."""
    return [dt.date.fromisocalendar(y, 1, 1) for y in years]


def emit_prediction_plot(dates, observed, predicted, path, splits=None, limit=REGULATORY_LIMIT, title=""):
    """SVG line chart of observed vs predicted concentrations.

    Draws a solid horizontal line at ``limit`` and a dashed vertical line at
    each date in ``splits``. Output bytes depend only on the inputs.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    dates = np.asarray(dates, dtype="datetime64[D]")
    observed = np.asarray(observed, dtype=np.float64)
    if isinstance(predicted, dict):
        series = dict(predicted)
    else:
        series = {"predicted": predicted}
    for label, values in series.items():
        if len(values) != len(dates):
            raise ValueError(f"{label}: {len(values)} values for {len(dates)} dates")
    if len(observed) != len(dates):
        raise ValueError(f"observed: {len(observed)} values for {len(dates)} dates")
    splits = split_boundaries() if splits is None else splits

    with matplotlib.rc_context({"svg.hashsalt": "satox", "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(9, 3.5))
        x = dates.astype(dt.date)
        ax.plot(x, observed, color="tab:blue", linewidth=1.2, label="observed", gid="observed")
        for i, (label, values) in enumerate(series.items()):
            ax.plot(x, np.asarray(values, float), color=f"C{i + 1}", linewidth=1.0, label=label, gid=f"pred-{i}")
        ax.axhline(limit, color="black", linewidth=1.0, gid="limit-line")
        for i, d in enumerate(splits):
            ax.axvline(d, color="gray", linestyle="--", linewidth=1.0, gid=f"split-{i}")
        ax.set_ylabel("ug OA equiv./kg")
        if title:
            ax.set_title(title)
        ax.legend(loc="upper left", fontsize="small")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
