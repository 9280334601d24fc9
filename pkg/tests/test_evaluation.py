import math
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from satox.evaluation import (
    Confusion,
    EvalReport,
    confusion,
    confusion_csv,
    emit_prediction_plot,
    format_number,
    mae,
    rmse,
    split_boundaries,
    summary_csv,
    threshold_accuracy,
    write_confusion,
)


def brute_mae(y, p):
    return sum(abs(a - b) for a, b in zip(y, p)) / len(y)


def brute_rmse(y, p):
    return math.sqrt(sum((a - b) ** 2 for a, b in zip(y, p)) / len(y))


def brute_accuracy(y, p, limit=160.0):
    return sum((a >= limit) == (b >= limit) for a, b in zip(y, p)) / len(y)


def test_hand_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0 and rmse([1, 2, 3], [1, 2, 3]) == 0
    assert mae([0, 2], [1, 1]) == 1 and rmse([0, 2], [1, 1]) == 1
    assert mae([0, 4], [0, 0]) == 2
    assert rmse([0, 4], [0, 0]) == pytest.approx(2.8284271247461903, abs=1e-15)


def test_threshold_examples():
    acc, c = threshold_accuracy([100, 200], [150, 150])
    assert (c.tn, c.fn, c.tp, c.fp) == (1, 1, 0, 0) and acc == 0.5
    acc, c = threshold_accuracy([1, 2, 3], [4, 5, 6])
    assert acc == 1.0 and c.tp == c.fp == c.fn == 0
    assert confusion([160], [160]) == Confusion(tp=1, tn=0, fp=0, fn=0)


def test_rejections():
    for fn in (mae, rmse, threshold_accuracy):
        with pytest.raises(ValueError, match="at least one"):
            fn([], [])
        with pytest.raises(ValueError, match="mismatch"):
            fn([1, 2], [1])


def test_brute_force_agreement_on_1000_vectors():
    rng = np.random.default_rng(12)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        y = rng.gamma(1.5, 120.0, n)
        p = y + rng.normal(0, 80, n)
        assert abs(mae(y, p) - brute_mae(y, p)) <= 1e-12 * max(1.0, brute_mae(y, p))
        assert abs(rmse(y, p) - brute_rmse(y, p)) <= 1e-12 * max(1.0, brute_rmse(y, p))
        assert threshold_accuracy(y, p)[0] == brute_accuracy(y, p)
        assert rmse(y, p) >= mae(y, p)


finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 50), elements=finite), st.data())
def test_rmse_dominates_mae(y, data):
    p = data.draw(arrays(np.float64, y.shape, elements=finite))
    assert rmse(y, p) >= mae(y, p) * (1 - 1e-12)


@given(st.floats(0, 1e3), st.integers(1, 30))
def test_equal_abs_errors_give_rmse_equal_mae(e, n):
    y = np.zeros(n)
    p = np.where(np.arange(n) % 2 == 0, e, -e)
    assert rmse(y, p) == pytest.approx(mae(y, p), rel=1e-12)


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 400)), st.data())
def test_confusion_sums_and_permutation_invariance(y, data):
    p = data.draw(arrays(np.float64, y.shape, elements=st.floats(0, 400)))
    perm = data.draw(st.permutations(range(len(y))))
    c = confusion(y, p)
    assert c.total == len(y)
    assert confusion(y[perm], p[perm]) == c
    assert c.accuracy == pytest.approx((c.tp + c.tn) / len(y))


@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 400)), st.data())
def test_accuracy_invariant_under_monotone_rescaling(y, data):
    p = data.draw(arrays(np.float64, y.shape, elements=st.floats(0, 400)))
    f = np.log1p  # strictly increasing, applied to data and limit alike
    assert threshold_accuracy(f(y), f(p), limit=f(160.0))[0] == threshold_accuracy(y, p)[0]


def _report(area="L5B", condition="multivariate", horizon=2, mae_=72.0, rmse_=99.0, acc=0.96):
    return EvalReport(area, condition, horizon, "LSTM", mae_, rmse_, acc, Confusion(1, 1, 0, 0))


def test_summary_row_renders_values_verbatim():
    text = summary_csv([_report()])
    header, row = text.strip().split("\n")
    assert header.startswith("area,condition,horizon,family,mae,rmse,accuracy")
    assert row.startswith("L5B,multivariate,2,LSTM,72,99,0.96,")


def test_summary_flags_mark_strict_winner_per_metric():
    reports = [
        _report(condition="univariate", mae_=80.0, rmse_=99.0, acc=0.9),
        _report(condition="multivariate", mae_=72.0, rmse_=99.0, acc=0.96),
    ]
    rows = [r.split(",") for r in summary_csv(reports).strip().split("\n")[1:]]
    flags = {r[1]: r[-3:] for r in rows}
    assert flags["multivariate"] == ["1", "0", "1"]
    assert flags["univariate"] == ["0", "0", "0"]


def test_summary_row_count_and_schema():
    reports = [
        _report(area=a, condition=c, horizon=h)
        for a in ["L1", "L2", "L5B", "L6", "RIAV1", "RIAV2", "RIAV3", "RIAV4"]
        for c in ["univariate", "multivariate"]
        for h in (1, 2, 3, 4)
    ]
    lines = summary_csv(reports).strip().split("\n")
    assert len(lines) == 65
    assert all(line.split(",")[1] in {"univariate", "multivariate"} for line in lines[1:])
    with pytest.raises(ValueError):
        summary_csv([])


def test_format_number():
    assert format_number(72.0) == "72"
    assert format_number(0.1 + 0.2) == "0.30000000000000004"


def test_confusion_csv(tmp_path):
    assert confusion_csv(Confusion(tp=3, tn=5, fp=1, fn=2)).split("\n")[1:3] == ["contaminated,3,2", "clean,1,5"]
    write_confusion(_report(), tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("actual,")


def _plot_inputs():
    dates = np.arange("2019-01-07", "2022-12-26", 7, dtype="datetime64[D]")
    rng = np.random.default_rng(3)
    obs = rng.gamma(1.2, 100, dates.size)
    return dates, obs, obs + rng.normal(0, 30, dates.size)


def test_plot_is_byte_deterministic(tmp_path):
    d, o, p = _plot_inputs()
    emit_prediction_plot(d, o, p, tmp_path / "a.svg", title="L2 t+1")
    emit_prediction_plot(d, o, p, tmp_path / "b.svg", title="L2 t+1")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def _path_coords(svg, gid):
    block = re.search(rf'<g id="{gid}">(.*?)</g>', svg, re.S).group(1)
    d = re.search(r'd="([^"]+)"', block).group(1)
    return [tuple(map(float, pt.split())) for pt in re.findall(r"[ML] ?([-\d.]+ [-\d.]+)", d)]


def test_plot_limit_line_and_split_markers(tmp_path):
    import matplotlib

    matplotlib.use("Agg")
    d, o, p = _plot_inputs()
    # observed line passes exactly through 0 and 320 so the y mapping is recoverable
    o[0], o[1] = 0.0, 320.0
    emit_prediction_plot(d, o, p, tmp_path / "a.svg")
    svg = (tmp_path / "a.svg").read_text()
    obs = _path_coords(svg, "observed")
    y0, y320 = obs[0][1], obs[1][1]
    (lx0, ly0), (lx1, ly1) = _path_coords(svg, "limit-line")[:2]
    assert ly0 == ly1
    assert ly0 == pytest.approx(y0 + (y320 - y0) * 160 / 320, abs=0.01)
    splits = [g for g in ("split-0", "split-1", "split-2") if f'id="{g}"' in svg]
    assert splits == ["split-0", "split-1"]
    for g in splits:
        (x0, _), (x1, _) = _path_coords(svg, g)[:2]
        assert x0 == x1
    assert "stroke-dasharray" in re.search(r'<g id="split-0">(.*?)</g>', svg, re.S).group(1)


def test_plot_length_mismatch(tmp_path):
    d, o, p = _plot_inputs()
    with pytest.raises(ValueError, match="values for"):
        emit_prediction_plot(d, o, p[:-1], tmp_path / "x.svg")


def test_split_boundaries_are_iso_year_starts():
    assert [b.isoformat() for b in split_boundaries()] == ["2021-01-04", "2022-01-03"]
