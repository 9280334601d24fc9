"""Command-line pipeline: synth -> ingest -> train-ae -> extract -> forecast -> eval.

Every stage reads and writes files under ``--out``. Exit status is 0 on
success, 1 when a computation fails and 2 for configuration or path errors
(including running a stage before the one that produces its inputs).
"""

import argparse
import configparser
import csv
import datetime as dt
import glob
import logging
import os
import sys
import zlib
from dataclasses import dataclass, field, fields

import numpy as np
from shapely.geometry import box

from . import autoencoder as ae
from . import evaluation, forecast, synthetic
from .ingest import archive, contamination, frames
from .nn import io as nn_io

log = logging.getLogger("satox")


class ConfigError(Exception):
    """Bad configuration or input path (exit status 2)."""


class MissingArtifactError(ConfigError):
    def __init__(self, path, producer):
        super().__init__(f"missing upstream artifact {path} (run `{producer}` first)")


def _floats(s):
    return tuple(float(v) for v in _items(s))


def _ints(s):
    return tuple(int(v) for v in _items(s))


def _items(s):
    if isinstance(s, (tuple, list)):
        return tuple(s)
    return tuple(v.strip() for v in str(s).split(",") if v.strip())


def _triples(s):
    """``"3-5-5;3-5-7"`` -> ((3, 5, 5), (3, 5, 7))."""
    if isinstance(s, (tuple, list)):
        return tuple(tuple(int(v) for v in t) for t in s)
    return tuple(tuple(int(v) for v in part.split("-")) for part in str(s).split(";") if part.strip())


def _date(s):
    return s if isinstance(s, dt.date) else dt.date.fromisoformat(str(s))


@dataclass
class RunConfig:
    out: str = "run"
    seed: int = 0
    contamination: str = ""
    sites: str = ""
    frames: str = ""
    study_start: dt.date = synthetic.STUDY_START
    study_end: dt.date = synthetic.STUDY_END
    areas: tuple = ()
    min_frame_coverage: float = 0.015
    min_satellite_coverage: float = 0.20
    min_valid_fraction: float = 0.10
    ae_schemes: tuple = ae.SCHEMES
    ae_kernels: tuple = ae.KERNEL_GRID
    ae_filters: tuple = ae.FILTER_GRID
    ae_max_epochs: int = 1000
    ae_patience: int = 100
    ae_dtype: str = "float64"
    ae_bn_momentum: float = 0.99
    conditions: tuple = forecast.CONDITIONS
    horizons: tuple = forecast.HORIZONS
    families: tuple = forecast.FAMILIES
    layer_dims: tuple = forecast.LAYER_DIMS
    fc_max_epochs: int = 1000
    fc_patience: int = 100
    synthetic_areas: tuple = synthetic.AREAS
    synthetic_lag: int = 2

    _parsers = {
        "seed": int,
        "study_start": _date,
        "study_end": _date,
        "areas": _items,
        "min_frame_coverage": float,
        "min_satellite_coverage": float,
        "min_valid_fraction": float,
        "ae_schemes": _items,
        "ae_kernels": _triples,
        "ae_filters": _triples,
        "ae_max_epochs": int,
        "ae_patience": int,
        "ae_bn_momentum": float,
        "conditions": _items,
        "horizons": _ints,
        "families": _items,
        "layer_dims": _ints,
        "fc_max_epochs": int,
        "fc_patience": int,
        "synthetic_areas": _items,
        "synthetic_lag": int,
    }

    def update(self, values):
        known = {f.name for f in fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown configuration key {key!r}")
            try:
                setattr(self, key, self._parsers.get(key, str)(raw))
            except ValueError as err:
                raise ConfigError(f"bad value for {key}: {raw!r} ({err})") from err
        return self

    def validate(self):
        if self.study_end < self.study_start:
            raise ConfigError("study_end precedes study_start")
        for c in self.conditions:
            if c not in forecast.CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}")
        for h in self.horizons:
            if h not in forecast.HORIZONS:
                raise ConfigError(f"horizon {h} not in {forecast.HORIZONS}")
        for f in self.families:
            if f not in forecast.FAMILIES:
                raise ConfigError(f"unknown family {f!r}")
        for d in self.layer_dims:
            if d not in forecast.LAYER_DIMS:
                raise ConfigError(f"layer dimension {d} not in {forecast.LAYER_DIMS}")
        if self.ae_dtype not in ("float32", "float64"):
            raise ConfigError(f"ae_dtype must be float32 or float64, got {self.ae_dtype!r}")
        if not 0 <= self.ae_bn_momentum < 1:
            raise ConfigError("ae_bn_momentum must lie in [0, 1)")
        try:
            self.ae_configs()
        except ValueError as err:
            raise ConfigError(str(err)) from err
        return self

    def ae_configs(self):
        return ae.config_grid(self.ae_schemes, self.ae_kernels, self.ae_filters)

    def path(self, *parts):
        return os.path.join(self.out, *parts)


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"configuration file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err
    if "run" not in parser:
        raise ConfigError(f"{path}: missing [run] section")
    return dict(parser["run"])


def derive_seed(seed, *keys):
    """Independent, reproducible seed for a (stage, area, ...) combination."""
    words = [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence([seed, *words]).generate_state(1)[0])


def _require(path, producer):
    if not os.path.exists(path):
        raise MissingArtifactError(path, producer)
    return path


def _require_input(path, what):
    if not path:
        raise ConfigError(f"no {what} path configured")
    if not os.path.exists(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


# --- synth ----------------------------------------------------------------


def cmd_synth(cfg):
    inputs = cfg.path("inputs")
    synthetic.generate_inputs(
        inputs,
        areas=cfg.synthetic_areas,
        start=cfg.study_start,
        end=cfg.study_end,
        seed=derive_seed(cfg.seed, "synth"),
        lag=cfg.synthetic_lag,
    )
    print(f"synthetic inputs written to {inputs}")


def _use_synthetic(cfg):
    inputs = cfg.path("inputs")
    if not os.path.exists(os.path.join(inputs, "contamination.csv")):
        cmd_synth(cfg)
    cfg.contamination = os.path.join(inputs, "contamination.csv")
    cfg.sites = os.path.join(inputs, "sites.csv")
    cfg.frames = os.path.join(inputs, "frames")


# --- ingest ---------------------------------------------------------------

SERIES_HEADER = ["week_index", "week", "ref_date", "value", "provenance"]


def write_series_csv(series, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_HEADER)
        for i, week, ref, v, prov in zip(series.week_index, series.weeks, series.ref_dates, series.values, series.provenance):
            w.writerow([int(i), str(week), str(ref), repr(float(v)), prov])


def read_series_csv(path, area):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SERIES_HEADER:
            raise ConfigError(f"{path}: header must be {','.join(SERIES_HEADER)}")
        rows = [r for r in reader if r]
    return contamination.AreaSeries(
        area,
        np.array([int(r[0]) for r in rows]),
        np.array([r[1] for r in rows], dtype="datetime64[D]"),
        np.array([float(r[3]) for r in rows]),
        np.array([r[4] == "measured" for r in rows]),
        np.array([r[2] for r in rows], dtype="datetime64[D]"),
    )


def patch_footprint(lat, lon, projection=frames.LocalProjection()):
    """Target-area polygon: the 64x64-pixel square west of the site."""
    x, y = projection.to_xy(lat, lon)
    px = frames.PIXEL_SIZE
    return box(
        x - (frames.SITE_COL + 0.5) * px,
        y - (frames.PATCH_SIZE - frames.SITE_ROW - 0.5) * px,
        x + 0.5 * px,
        y + (frames.SITE_ROW + 0.5) * px,
    )


def _frames_by_date(frames_dir):
    files = sorted(glob.glob(os.path.join(frames_dir, "*.npz")))
    for path in files:
        by_date = {}
        for f in frames.load_frames(path):
            by_date.setdefault(f.date, []).append(f)
        yield from sorted(by_date.items())


def extract_area_patches(frames_dir, sites, cfg):
    patches, discarded = [], {}
    for date, day_frames in _frames_by_date(frames_dir):
        if date < cfg.study_start or date > cfg.study_end:
            continue
        for area, (lat, lon) in sites.items():
            selection = frames.select_frames(
                day_frames, patch_footprint(lat, lon), cfg.min_frame_coverage, cfg.min_satellite_coverage
            )
            reason = "no-frames"
            for frame in selection.frames:
                try:
                    patches.append(frames.extract_patch(frame, lat, lon, area, min_valid_fraction=cfg.min_valid_fraction))
                    break
                except frames.PatchDiscarded as err:
                    reason = err.reason
            else:
                discarded[reason] = discarded.get(reason, 0) + 1
    return patches, discarded


def cmd_ingest(cfg):
    _require_input(cfg.contamination, "contamination CSV")
    _require_input(cfg.sites, "sites CSV")
    _require_input(cfg.frames, "frames directory")
    records, _ = contamination.parse_contamination_csv(cfg.contamination, cfg.study_start, cfg.study_end)
    try:
        sites = frames.read_sites_csv(cfg.sites)
    except ValueError as err:
        raise ConfigError(str(err)) from err
    areas = cfg.areas or tuple(sites)
    missing = [a for a in areas if a not in sites]
    if missing:
        raise ConfigError(f"areas without a site in {cfg.sites}: {', '.join(missing)}")
    os.makedirs(cfg.path("series"), exist_ok=True)
    rows = []
    for area in areas:
        raw = contamination.build_weekly_series(records, area, cfg.study_start, cfg.study_end)
        rows.append(contamination.series_summary(raw))
        write_series_csv(contamination.impute_forward_fill(raw), cfg.path("series", f"{area}.csv"))
    patches, discarded = extract_area_patches(cfg.frames, {a: sites[a] for a in areas}, cfg)
    archive.write_patch_archive(patches, cfg.path("patches.olp"))
    with open(cfg.path("ingest_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area", "measured", "missing", "no_cont", "cont", "cont_share", "patches"])
        for r in rows:
            n = sum(p.area == r["area"] for p in patches)
            w.writerow([r["area"], r["measured"], r["missing"], r["no_cont"], r["cont"], f"{r['cont_share']:.4f}", n])
    print(f"{'area':8s} {'measured':>8s} {'missing':>8s} {'no_cont':>8s} {'cont':>6s} {'cont%':>6s}")
    for r in rows:
        print(
            f"{r['area']:8s} {r['measured']:8d} {r['missing']:8d} {r['no_cont']:8d} {r['cont']:6d} "
            f"{100 * r['cont_share']:6.1f}"
        )
    print(f"{len(patches)} patches kept; discarded: {dict(sorted(discarded.items()))}")


# --- train-ae / extract ---------------------------------------------------


def _load_patches(cfg):
    patches = archive.read_patch_archive(_require(cfg.path("patches.olp"), "ingest"))
    by_area = {}
    for p in patches:
        by_area.setdefault(p.area, []).append(p)
    return by_area


def cmd_train_ae(cfg):
    by_area = _load_patches(cfg)
    os.makedirs(cfg.path("models"), exist_ok=True)
    for area in sorted(by_area):
        patches = sorted(by_area[area], key=lambda p: p.date)
        X = np.stack([p.pixels for p in patches]).astype(np.float64)
        M = np.stack([p.valid_mask for p in patches])
        result = ae.grid_search(
            X,
            [p.date for p in patches],
            mask=M,
            configs=cfg.ae_configs(),
            max_epochs=cfg.ae_max_epochs,
            patience=cfg.ae_patience,
            seed=derive_seed(cfg.seed, "ae", area),
            dtype=cfg.ae_dtype,
            bn_momentum=cfg.ae_bn_momentum,
        )
        ae.save_autoencoder(result.best_model, cfg.path("models", f"{area}.ae"))
        nn_io.write_history(result.selection_model.history_, cfg.path("models", f"{area}_history.csv"))
        with open(cfg.path("models", f"{area}_grid.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scheme", "kernels", "filters", "val_mse", "params", "epochs", "best_epoch"])
            for c in result.candidates:
                w.writerow(
                    [
                        c.config.scheme,
                        "-".join(map(str, c.config.kernels)),
                        "-".join(map(str, c.config.filters)),
                        repr(float(c.val_mse)),
                        c.n_params,
                        c.epochs,
                        c.best_epoch,
                    ]
                )
        print(f"{area}: {result.best_config.label} val_mse={result.best_val_mse:.6g}")


def cmd_extract(cfg):
    by_area = _load_patches(cfg)
    features = []
    for area in sorted(by_area):
        model = ae.load_autoencoder(_require(cfg.path("models", f"{area}.ae"), "train-ae"))
        features += ae.encode_patches(model, by_area[area])
    ae.write_latent_csv(features, cfg.path("latent.csv"))
    print(f"{len(features)} latent vectors written to {cfg.path('latent.csv')}")


# --- forecast -------------------------------------------------------------

PREDICTION_HEADER = ["area", "condition", "horizon", "family", "date", "observed", "predicted"]


def _series_areas(cfg):
    series_dir = _require(cfg.path("series"), "ingest")
    areas = cfg.areas or tuple(sorted(os.path.splitext(f)[0] for f in os.listdir(series_dir) if f.endswith(".csv")))
    if not areas:
        raise MissingArtifactError(cfg.path("series", "<area>.csv"), "ingest")
    return areas


def cmd_forecast(cfg):
    areas = _series_areas(cfg)
    features = None
    if "multivariate" in cfg.conditions:
        features = ae.read_latent_csv(_require(cfg.path("latent.csv"), "extract"))
    os.makedirs(cfg.path("forecasters"), exist_ok=True)
    specs, rows = [], []
    for area in areas:
        series = read_series_csv(_require(cfg.path("series", f"{area}.csv"), "ingest"), area)
        aligned = forecast.align_features(series, features)
        for condition in cfg.conditions:
            for h in cfg.horizons:
                data = forecast.build_dataset(aligned, condition, h)
                spec = forecast.train_and_select(
                    data,
                    families=cfg.families,
                    layer_dims=cfg.layer_dims,
                    max_epochs=cfg.fc_max_epochs,
                    patience=cfg.fc_patience,
                    seed=derive_seed(cfg.seed, "forecast", area, condition, h),
                )
                specs.append(spec)
                nn_io.save_weights(spec.model.model_, cfg.path("forecasters", f"{area}_{condition}_h{h}.txc"))
                observed, predicted = forecast.holdout_predictions(spec, data)
                for week, o, p in zip(data.target_weeks(aligned, "test"), observed, predicted):
                    rows.append([area, condition, h, spec.family, str(week), repr(float(o)), repr(float(p))])
                print(f"{area} {condition} t+{h}: {spec.family}/{spec.layer_dim} val_mae={spec.val_mae:.4f}")
    forecast.write_registry(specs, cfg.path("registry.csv"))
    with open(cfg.path("predictions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        w.writerows(rows)


# --- eval -----------------------------------------------------------------


def cmd_eval(cfg):
    path = _require(cfg.path("predictions.csv"), "forecast")
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PREDICTION_HEADER:
            raise ConfigError(f"{path}: header must be {','.join(PREDICTION_HEADER)}")
        for row in reader:
            key = (row["area"], row["condition"], int(row["horizon"]), row["family"])
            groups.setdefault(key, []).append((row["date"], float(row["observed"]), float(row["predicted"])))
    if not groups:
        raise ConfigError(f"{path}: no predictions")
    os.makedirs(cfg.path("confusion"), exist_ok=True)
    os.makedirs(cfg.path("plots"), exist_ok=True)
    reports = []
    for (area, condition, h, family), rows in sorted(groups.items()):
        dates, observed, predicted = zip(*rows)
        report = evaluation.EvalReport.from_predictions(area, condition, h, family, observed, predicted)
        reports.append(report)
        evaluation.write_confusion(report, cfg.path("confusion", f"{area}_{condition}_h{h}.csv"))
        evaluation.emit_prediction_plot(
            dates,
            observed,
            {f"{family} t+{h}": predicted},
            cfg.path("plots", f"{area}_{condition}_h{h}.svg"),
            title=f"{area} {condition} t+{h}",
        )
    evaluation.write_summary(reports, cfg.path("summary.csv"))
    print(evaluation.summary_csv(reports), end="")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train-ae": cmd_train_ae,
    "extract": cmd_extract,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value file with a [run] section")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="run directory (default: run)")
    common.add_argument("--synthetic", action="store_true", help="use generated inputs under OUT/inputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="satox", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate synthetic inputs")
    ing = sub.add_parser("ingest", parents=[common], help="weekly series and satellite patches")
    ing.add_argument("--contamination")
    ing.add_argument("--sites")
    ing.add_argument("--frames")
    ing.add_argument("--study-start")
    ing.add_argument("--study-end")
    ing.add_argument("--min-frame-coverage", type=float)
    ing.add_argument("--min-satellite-coverage", type=float)
    ing.add_argument("--min-valid-fraction", type=float)
    sub.add_parser("train-ae", parents=[common], help="autoencoder grid search per area")
    sub.add_parser("extract", parents=[common], help="encode patches to latent features")
    fc = sub.add_parser("forecast", parents=[common], help="train and select forecasters")
    fc.add_argument("--condition", choices=["univariate", "multivariate", "both"])
    sub.add_parser("eval", parents=[common], help="metrics, confusion matrices and plots")
    return parser


def resolve_config(args):
    cfg = RunConfig()
    if args.config:
        cfg.update(load_config(args.config))
    overrides = {}
    for key in (
        "seed",
        "out",
        "contamination",
        "sites",
        "frames",
        "study_start",
        "study_end",
        "min_frame_coverage",
        "min_satellite_coverage",
        "min_valid_fraction",
    ):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    condition = getattr(args, "condition", None)
    if condition:
        overrides["conditions"] = forecast.CONDITIONS if condition == "both" else (condition,)
    cfg.update(overrides)
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        if args.synthetic and args.command != "synth":
            _use_synthetic(cfg)
        COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError, contamination.ContaminationFormatError, archive.ArchiveError) as err:
        print(f"satox {args.command}: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - any computation failure maps to status 1
        log.debug("computation failed", exc_info=True)
        print(f"satox {args.command}: failed: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
