"""End-to-end acceptance checks, one PASS/FAIL line each (see the summary section).

Slow: the autoencoder grid alone takes most of the run.
"""

import csv
import datetime as dt
import math
import time
import warnings

import numpy as np
import pytest
from shapely.geometry import box

from satox import autoencoder as ae
from satox import cli, nn, synthetic
from satox import forecast as fc
from satox.evaluation import mae, rmse, threshold_accuracy
from satox.ingest import FLAG_CLOUD, Frame, GeoTransform, LocalProjection, PatchDiscarded, extract_patch, select_frames
from satox.nn.gradcheck import numerical_gradient, relative_error

GRAD_TOL = 1e-4
PROBES = 10


# --- 1. gradient suite ---------------------------------------------------

def _layer_error(layer, shape, x, rng, training=True):
    layer.build(shape, np.random.default_rng(0), np.float64)
    R = rng.standard_normal(layer.forward(x, training=training).shape)

    def loss():
        return float(np.sum(layer.forward(x, training=training) * R))

    layer.forward(x, training=training)
    dx, grads = layer.backward(R)
    pairs = [(dx, x)] + [(grads[k].copy(), p) for k, p in layer.params.items()]
    worst, probed = 0.0, 0
    for analytic, arr in pairs:
        idx = rng.choice(arr.size, size=min(PROBES, arr.size), replace=False)
        num = numerical_gradient(loss, arr, idx)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], num).max())
        probed += len(idx)
    return worst, probed


def _lstm_cell_error(rng):
    cell = nn.LSTMCell(4)
    cell.build((3,), np.random.default_rng(0), np.float64)
    x, h, c = rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    Rh, Rc = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))

    def loss():
        h2, c2 = cell.forward(x, h, c)
        return float(np.sum(h2 * Rh) + np.sum(c2 * Rc))

    cell.forward(x, h, c)
    (dx, dh, dc), grads = cell.backward(Rh, Rc)
    worst, probed = 0.0, 0
    for analytic, arr in [(dx, x), (dh, h), (dc, c)] + [(grads[k].copy(), cell.params[k]) for k in cell.params]:
        idx = rng.choice(arr.size, size=min(PROBES, arr.size), replace=False)
        worst = max(worst, relative_error(analytic.reshape(-1)[idx], numerical_gradient(loss, arr, idx)).max())
        probed += len(idx)
    return worst, probed


def _loss_error(name, rng):
    pred = rng.standard_normal((3, 4, 4, 2))
    target = rng.standard_normal(pred.shape)
    args = (rng.random(pred.shape[:-1]) > 0.3,) if name == "masked-mse" else ()
    fn = nn.losses.get(name)
    _, grad = fn(pred, target, *args)
    idx = rng.choice(pred.size, size=20, replace=False)
    num = numerical_gradient(lambda: fn(pred, target, *args)[0], pred, idx)
    return relative_error(grad.reshape(-1)[idx], num).max(), len(idx)


def test_01_gradient_suite(verdict):
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    errors = {
        "dense": _layer_error(nn.Dense(5, "tanh"), (7,), rng.standard_normal((4, 7)), rng),
        "conv2d": _layer_error(nn.Conv2D(3, 3, "tanh"), (6, 5, 2), rng.standard_normal((2, 6, 5, 2)), rng),
        "maxpool": _layer_error(nn.MaxPool2x2(), (6, 4, 3), rng.standard_normal((2, 6, 4, 3)), rng),
        "upsample": _layer_error(nn.UpSample2x2(), (3, 2, 3), rng.standard_normal((2, 3, 2, 3)), rng),
        "batchnorm": _layer_error(nn.BatchNorm(), (4, 4, 3), rng.standard_normal((5, 4, 4, 3)), rng),
        "lstm-cell": _lstm_cell_error(rng),
    }
    for name in ("mae", "mse", "masked-mse"):
        errors[name] = _loss_error(name, rng)
    elapsed = time.perf_counter() - started
    worst = max(e for e, _ in errors.values())
    fewest = min(n for _, n in errors.values())
    verdict(
        1,
        "gradient suite",
        worst < GRAD_TOL and fewest >= PROBES and elapsed < 120,
        f"worst rel err {worst:.1e} (< {GRAD_TOL:g}) over {len(errors)} kinds, "
        f">= {fewest} probes each, {elapsed:.1f}s (< 120s)",
    )


# --- 2. masked-loss invariants ---------------------------------------------

def _tiny_autoencoder():
    layers = [
        nn.Conv2D(4, 3, "relu"),
        nn.BatchNorm(momentum=0.9),
        nn.MaxPool2x2(),
        nn.Flatten(),
        nn.Dense(4, "elu"),
        nn.Dense(4 * 4 * 4, "relu"),
        nn.Reshape((4, 4, 4)),
        nn.UpSample2x2(),
        nn.Conv2D(3, 3, "linear"),
    ]
    return nn.Sequential(layers, (8, 8, 3), seed=3)


def _masked_step(model, raw, mask):
    """Zero-fill invalid pixels, then loss and every gradient of one masked training step."""
    x = np.where(mask[..., None], raw, 0.0)
    loss, dy = nn.masked_mse(model.forward(x, training=True), x, mask)
    model.backward(dy)
    return loss, dy.copy(), [g.copy() for g in model.gradients()]


def _bits(arrays):
    return b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)


def test_02_masked_loss_invariants(verdict):
    rng = np.random.default_rng(5)
    raw = rng.random((2, 8, 8, 3))
    mask = rng.random((2, 8, 8)) < 0.6
    pred, target = rng.random(raw.shape), rng.random(raw.shape)
    loss0, grad0 = nn.masked_mse(pred, target, mask)
    model = _tiny_autoencoder()
    ref = _masked_step(model, raw, mask)
    ref_bits = _bits([np.float64(ref[0]), ref[1], *ref[2]])
    changed = 0
    invalid = list(zip(*np.nonzero(~mask)))
    for pos in invalid:
        p2, t2, r2 = pred.copy(), target.copy(), raw.copy()
        p2[pos] += rng.normal(0, 100, 3)
        t2[pos] += rng.normal(0, 100, 3)
        r2[pos] = rng.normal(0, 1e6, 3)
        loss, grad = nn.masked_mse(p2, t2, mask)
        step = _masked_step(model, r2, mask)
        changed += loss != loss0 or grad.tobytes() != grad0.tobytes()
        changed += _bits([np.float64(step[0]), step[1], *step[2]]) != ref_bits
    nonzero = int(np.count_nonzero(grad0[~mask])) + int(np.count_nonzero(ref[1][~mask]))
    verdict(
        2,
        "masked-loss invariants",
        changed == 0 and nonzero == 0 and len(invalid) > 0,
        f"{len(invalid)} invalid pixels of {mask.size} perturbed one at a time: {changed} changed loss/gradients, "
        f"{nonzero} nonzero gradient entries at masked positions",
    )


# --- 3. metric oracles -----------------------------------------------------

def test_03_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    worst, dominance, acc_mismatch = 0.0, 0, 0
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        y = rng.gamma(1.5, 120.0, n)
        p = np.maximum(y + rng.normal(0, 80, n), 0)
        pairs = list(zip(y.tolist(), p.tolist()))
        bf_mae = math.fsum(abs(a - b) for a, b in pairs) / n
        bf_rmse = math.sqrt(math.fsum((a - b) ** 2 for a, b in pairs) / n)
        bf_acc = sum((a >= 160) == (b >= 160) for a, b in pairs) / n
        m, r = mae(y, p), rmse(y, p)
        worst = max(worst, abs(m - bf_mae), abs(r - bf_rmse))
        acc_mismatch += abs(threshold_accuracy(y, p)[0] - bf_acc) > 1e-12
        dominance += r < m
    verdict(
        3,
        "metric oracles",
        worst <= 1e-12 and acc_mismatch == 0 and dominance == 0,
        f"max absolute deviation {worst:.1e} (<= 1e-12), accuracy mismatches {acc_mismatch}, "
        f"rmse < mae in {dominance}/1000",
    )


# --- 4. geometry oracles ---------------------------------------------------

PX = 300.0
AREA = box(0.0, 0.0, 100 * PX, 100 * PX)
DAY = dt.date(2019, 6, 3)


def _strip(sat, top_row, n_rows):
    t = GeoTransform(0.0, (100 - top_row) * PX, PX)
    return Frame(sat, DAY, t, np.zeros((n_rows, 100, 3), np.float32), np.zeros((n_rows, 100), np.uint8))


def _indexed_frame(rows=200, cols=260):
    r, c = np.mgrid[0:rows, 0:cols]
    ch = np.stack([r, c, r * 1000 + c], axis=-1).astype(np.float32)
    return Frame("3A", DAY, GeoTransform(-30000.0, 45000.0, PX), ch, np.zeros((rows, cols), np.uint8))


def _site(frame, row, col):
    return LocalProjection().to_latlon(*frame.transform.center_of(row, col))


def _boundary_outcome(n_valid):
    f = _indexed_frame()
    f.flags[:] = FLAG_CLOUD
    window = f.flags[69:133, 137:201].reshape(-1)
    window[:n_valid] = 0
    f.flags[69:133, 137:201] = window.reshape(64, 64)
    try:
        return extract_patch(f, *_site(f, 100, 200), "L2").valid_mask.sum()
    except PatchDiscarded as err:
        return err.reason


def test_04_geometry_oracles(verdict):
    checks = {}
    b30, b25 = _strip("3B", 10, 30), _strip("3B", 40, 25)
    sel = select_frames([_strip("3A", 0, 5), _strip("3A", 60, 1), b30, b25], AREA)
    checks["3A{5,1} vs 3B{30,25}: 3B merged"] = (
        sel.satellite == "3B" and len(sel.frames) == 1 and sel.frames[0].shape == (55, 100)
        and sel.frames[0].transform == b30.transform
    )
    single = _strip("3B", 0, 50)
    sel = select_frames([single], AREA)
    checks["single 50% frame as-is"] = sel.satellite == "3B" and sel.frames == [single]
    checks["3A 40% vs 3B 35%: 3A"] = select_frames([_strip("3A", 0, 40), _strip("3B", 50, 35)], AREA).satellite == "3A"
    f = _indexed_frame()
    p = extract_patch(f, *_site(f, 100, 200), "L2")
    checks["site (100,200): rows 69..132, cols 137..200, site at (31,63)"] = (
        np.array_equal(p.pixels, f.channels[69:133, 137:201]) and tuple(p.pixels[31, 63, :2]) == (100, 200)
    )
    checks["409/4096 discarded"] = _boundary_outcome(409) == "too-few-valid"
    checks["410/4096 kept"] = _boundary_outcome(410) == 410
    failed = [k for k, ok in checks.items() if not ok]
    verdict(4, "geometry oracles", not failed, f"{len(checks) - len(failed)}/{len(checks)} hand examples exact" + (
        f"; failed: {failed}" if failed else ""))


# --- 5. windowing ----------------------------------------------------------

def test_05_windowing(verdict):
    rng = np.random.default_rng(55)
    wrong, crossings, total = 0, 0, 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(200):
            h = int(rng.integers(1, 5))
            n = int(rng.integers(12 + h, 400))
            values = rng.random(n)
            ds = fc.make_windows(values, np.full(n, "train"), h)
            wrong += len(ds.y) != n - 11 - h
            # the same series cut into three chronological splits
            cuts = np.sort(rng.choice(np.arange(1, n), size=2, replace=False))
            labels = np.array(["train"] * cuts[0] + ["validation"] * (cuts[1] - cuts[0]) + ["test"] * (n - cuts[1]))
            ds = fc.make_windows(values, labels, h)
            for target, split in zip(ds.target_index, ds.split):
                first = target - h - 11
                crossings += not (labels[first : target + 1] == split).all()
            total += len(ds.y)
    verdict(
        5,
        "windowing",
        wrong == 0 and crossings == 0,
        f"{wrong}/200 counts differ from N-11-h; {crossings} of {total} split windows cross a boundary",
    )


# --- 6. overfit capability -------------------------------------------------

def test_06_overfit_capability(verdict):
    rng = np.random.default_rng(6)
    X = rng.uniform(0, 1, (8, 12, 1))
    y = rng.uniform(0.1, 0.9, 8)
    maes = {}
    for family in fc.FAMILIES:
        est = fc.Forecaster(family, 12, max_epochs=2000, seed=0).fit(X, y)
        maes[family] = float(np.mean(np.abs(est.predict(X) - y)))
    verdict(
        6,
        "overfit capability",
        max(maes.values()) < 0.02,
        ", ".join(f"{k} {v:.4f}" for k, v in maes.items()) + " training MAE after 2000 epochs (< 0.02)",
    )


# --- 7. autoencoder quality ------------------------------------------------

GRID_EPOCHS = 4  # ~5 min per grid-wide epoch on one core

def test_07_autoencoder_grid(verdict):
    fields = synthetic.smooth_field_dataset(200, seed=0)
    started = time.perf_counter()
    res = ae.grid_search(
        fields.X, fields.dates, fields.mask, retrain=False,
        max_epochs=GRID_EPOCHS, patience=GRID_EPOCHS - 1, dtype="float32", bn_momentum=0.9,
    )
    elapsed = time.perf_counter() - started
    _, val = ae.chronological_split(fields.dates)
    winner = res.selection_model
    Xn, m = winner.normalize(fields.X[val], fields.mask[val])
    recon = winner.model_.predict(Xn, batch_size=winner.batch_size).astype(np.float64)
    variance = np.array([Xn[..., c][m].var() for c in range(3)])
    channel_mse = np.array([((recon[..., c] - Xn[..., c])[m] ** 2).mean() for c in range(3)])
    ratios = channel_mse / variance
    latents = {c.latent_size for c in res.candidates}
    verdict(
        7,
        "autoencoder quality",
        len(res.candidates) == 32 and elapsed < 1800 and res.best_val_mse < 0.3 * variance.mean()
        and ratios.max() < 0.3 and latents == {4},
        f"{len(res.candidates)} candidates in {elapsed:.0f}s (< 1800s) at {GRID_EPOCHS} epochs each; winner "
        f"{res.best_config.label} val masked MSE {res.best_val_mse:.2e} = {res.best_val_mse / variance.mean():.3f}x "
        f"mean channel variance, per-channel ratios {np.array2string(ratios, precision=3)} (< 0.3); "
        f"latent lengths {sorted(latents)}",
    )


# --- 8 and 9. forecasting on synthetic corpora -----------------------------

REDUCED_FAMILIES = ("MLP", "CNN")
REDUCED_TRAINING = {"max_epochs": 500, "patience": 50}


def _selected_test_mae(series, features, condition, horizon, seed):
    aligned = fc.align_features(series, features)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ds = fc.build_dataset(aligned, condition, horizon)
    spec = fc.train_and_select(ds, REDUCED_FAMILIES, fc.LAYER_DIMS, seed=seed, **REDUCED_TRAINING)
    observed, predicted = fc.holdout_predictions(spec, ds)
    return mae(observed, predicted)


def test_08_multivariate_benefit(verdict):
    gain, spurious = [], []
    for seed in range(5):
        series, features = synthetic.lead_lag_corpus(seed)
        uni = _selected_test_mae(series, features, "univariate", 2, seed)
        multi = _selected_test_mae(series, features, "multivariate", 2, seed)
        shuffled = _selected_test_mae(series, synthetic.permute_features(features, seed), "multivariate", 2, seed)
        gain.append(multi / uni)
        spurious.append(shuffled / uni)
    g, s = float(np.median(gain)), float(np.median(spurious))
    verdict(
        8,
        "multivariate benefit",
        g <= 0.7 and abs(s - 1) <= 0.10,
        f"median multivariate/univariate test MAE {g:.3f} (<= 0.7); with time-permuted features {s:.3f} "
        f"(within 1 +/- 0.10); per-seed {np.round(gain, 3).tolist()} / {np.round(spurious, 3).tolist()}",
    )


def test_09_horizon_degradation(verdict):
    maes = {1: [], 4: []}
    for seed in range(10):
        series = synthetic.ar1_series(seed)
        for h in maes:
            maes[h].append(_selected_test_mae(series, None, "univariate", h, seed))
    m1, m4 = float(np.median(maes[1])), float(np.median(maes[4]))
    verdict(9, "horizon degradation", m1 < m4, f"median test MAE t+1 {m1:.2f} < t+4 {m4:.2f} over 10 seeds")


# --- 10. end-to-end determinism --------------------------------------------

PIPELINE = """\
[run]
ae_schemes = conv-pool
ae_kernels = 3-3-3
ae_filters = 16-16-16
ae_max_epochs = 2
ae_patience = 1
ae_dtype = float32
ae_bn_momentum = 0.9
layer_dims = 12
fc_max_epochs = 3
fc_patience = 1
"""


def _pipeline(out, config, seed):
    argv = ["--config", str(config), "--out", str(out), "--seed", str(seed)]
    codes = [cli.main(["synth", *argv])]
    codes += [cli.main([stage, *argv, "--synthetic"]) for stage in ("ingest", "train-ae", "extract", "forecast", "eval")]
    return codes


@pytest.mark.filterwarnings("ignore")
def test_10_end_to_end_determinism(verdict, tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(PIPELINE)
    a, b = tmp_path / "a", tmp_path / "b"
    codes = _pipeline(a, config, 7) + _pipeline(b, config, 7)
    outputs = ["summary.csv"] + sorted(str(p.relative_to(a)) for p in (a / "plots").glob("*.svg"))
    differ = [rel for rel in outputs if (a / rel).read_bytes() != (b / rel).read_bytes()]
    with open(a / "summary.csv", newline="") as fh:
        rows = len(list(csv.DictReader(fh)))
    verdict(
        10,
        "end-to-end determinism",
        codes == [0] * 12 and not differ and rows == 64,
        f"exit codes {sorted(set(codes))}; {len(outputs) - len(differ)}/{len(outputs)} summary/plot files "
        f"byte-identical across two --seed 7 runs; summary rows {rows} (8 areas x 2 conditions x 4 horizons)",
    )
