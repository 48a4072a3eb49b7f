"""Exogenous CSV ingestion and synthetic series."""

import datetime as dt

import numpy as np
import pytest

from ecpricing.data import DataError, ExogenousDay, load_exogenous, synth_baseload, synth_exogenous, write_exogenous


@pytest.fixture
def files(tmp_path):
    days = synth_exogenous(3, seed=1, n_prosumers=2)
    return days, write_exogenous(days, tmp_path)


def load(paths):
    return load_exogenous(paths["prices"], paths["temperature"], paths["pv"], paths["baseload"])


def test_round_trip_is_exact(files):
    days, paths = files
    back = load(paths)
    assert [d.date for d in back] == [d.date for d in days]
    for a, b in zip(days, back):
        np.testing.assert_array_equal(a.spot_price, b.spot_price)
        np.testing.assert_array_equal(a.outdoor_temp, b.outdoor_temp)
        np.testing.assert_array_equal(a.pv_reference, b.pv_reference)
        np.testing.assert_array_equal(a.baseload, b.baseload)


def rewrite(path, fn):
    lines = path.read_text().splitlines()
    path.write_text("\n".join(fn(lines)) + "\n")


def test_negative_prices_are_clipped(files):
    _, paths = files
    rewrite(paths["prices"], lambda l: [l[0], l[1].split(",")[0] + ",-0.7"] + l[2:])
    assert load(paths)[0].spot_price[0] == 0.0


@pytest.mark.parametrize("mutation, message", [
    (lambda l: l[:5] + l[6:], "does not follow"),
    (lambda l: l[:24] + l[25:], "missing hours [23]"),
    (lambda l: l[:-24], "not aligned"),
    (lambda l: [l[0]] + [l[1] + ",9"] + l[2:], "expected 2 fields"),
    (lambda l: [l[0], l[1].split(",")[0] + ",abc"] + l[2:], "not numeric"),
    (lambda l: [l[0], "yesterday,1.0"] + l[2:], "invalid ISO-8601"),
    (lambda l: ["time,temp_c"] + l[1:], "first column"),
    (lambda l: [l[0]], "no data rows"),
])
def test_malformed_temperature_files(files, mutation, message):
    _, paths = files
    rewrite(paths["temperature"], mutation)
    with pytest.raises(DataError, match=message.replace("[", r"\[").replace("]", r"\]")):
        load(paths)


def test_other_schema_errors(files, tmp_path):
    _, paths = files
    rewrite(paths["pv"], lambda l: ["timestamp,pv_kw"] + l[1:])
    with pytest.raises(DataError, match="expected columns"):
        load(paths)
    _, paths = files[0], write_exogenous(files[0], tmp_path / "b")
    rewrite(paths["baseload"], lambda l: [l[0], l[1].split(",")[0] + ",-1.0,0.5"] + l[2:])
    with pytest.raises(DataError, match="negative baseload"):
        load(paths)
    with pytest.raises(DataError, match="not found"):
        load_exogenous(tmp_path / "nope.csv", paths["temperature"], paths["pv"], paths["baseload"])


def test_dst_short_day_rejected(tmp_path):
    # a 23-hour day as in a spring-forward transition: 02:00 is skipped
    days = synth_exogenous(1, seed=0, n_prosumers=1)
    paths = write_exogenous(days, tmp_path)
    for key in ("prices", "temperature", "pv"):
        rewrite(paths[key], lambda l: [x for i, x in enumerate(l) if i != 3])
    with pytest.raises(DataError, match="does not follow"):
        load(paths)


def test_exogenous_day_validation():
    kw = dict(outdoor_temp=np.zeros(3), pv_reference=np.zeros(3), baseload=np.ones((1, 3)))
    with pytest.raises(DataError):
        ExogenousDay(dt.date(2023, 1, 1), np.array([1.0, -1.0, 1.0]), **kw)
    with pytest.raises(DataError):
        ExogenousDay(dt.date(2023, 1, 1), np.ones(4), **kw)
    d = ExogenousDay(dt.date(2023, 1, 1), np.ones(3), np.array([1.0, 5.0, 2.0]), np.zeros(3), np.ones((1, 3)))
    assert d.outdoor_temp_peak == 5.0
    with pytest.raises(ValueError):
        d.spot_price[0] = 3.0


def test_synthetic_series_ranges_and_determinism():
    days = synth_exogenous(365, seed=4, n_prosumers=3)
    prices = np.array([d.spot_price for d in days])
    temps = np.array([d.outdoor_temp for d in days])
    pv = np.array([d.pv_reference for d in days])
    assert prices.min() >= 0 and prices.max() <= 4
    assert -15 < temps.min() and temps.max() < 30
    assert all(d.outdoor_temp.mean() <= 17.5 for d in days)
    assert pv.min() >= 0 and pv.max() <= 0.8
    assert pv[180].sum() > pv[0].sum()  # summer yields more than winter
    again = synth_exogenous(5, seed=4, n_prosumers=3)
    np.testing.assert_array_equal(again[2].spot_price, days[2].spot_price)
    assert days[1].date == dt.date(2023, 1, 2)
    b = synth_baseload(3, 4)
    assert b.shape == (3, 24) and np.all(b > 0)
    with pytest.raises(ValueError):
        synth_exogenous(0, 1)
