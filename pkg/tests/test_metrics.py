"""Regret, violation and summary statistics against hand-computed values."""

import numpy as np
import pytest

from ecpricing.bilevel import CommunityEconomics
from ecpricing.learner import WeightBelief
from ecpricing.metrics import (
    aggregate_runs,
    dispatch,
    first_day_below,
    plateau_increase,
    posterior_error,
    read_table,
    realized_cost,
    regret_records,
    violation_series,
    write_table,
)


def test_dispatch_and_violation():
    y = np.array([[2.0, -1.0, 0.5], [1.5, -0.5, -1.0]])
    imp, exp, exc = dispatch(y, 3.0)
    np.testing.assert_allclose(imp, [3.5, 0.0, 0.0])
    np.testing.assert_allclose(exp, [0.0, 1.5, 0.5])
    np.testing.assert_allclose(exc, [0.5, 0.0, 0.0])
    np.testing.assert_allclose(violation_series(y, [np.inf, 1, 1]), [0, 0, 0])


def test_realized_cost_by_hand():
    econ = CommunityEconomics(spot_price=[1.0, 2.0], import_tariff=0.5, export_tariff=0.1,
                              violation_penalty=10.0, capacity_limit=2.0, outside_cost=[0.0])
    # period 0 imports 3 (1 above the limit) at 1.5, period 1 exports 1 at 1.9
    assert realized_cost(np.array([[3.0, -1.0]]), econ) == pytest.approx(3 * 1.5 + 10 * 1 - 1.9)


def test_regret_records():
    recs = regret_records([5.0, 4.0, 3.0], [4.0, 4.0, 2.5])
    assert [r.regret for r in recs] == [1.0, 0.0, 0.5]
    assert [r.cumulative for r in recs] == [1.0, 1.0, 1.5]
    regret_records([1.0], [1.00005])  # within tolerance
    with pytest.raises(ValueError, match="negative regret"):
        regret_records([1.0], [1.1])


def test_plateau_increase():
    cum = np.array([10.0, 15.0, 16.0, 16.5, 17.0])
    assert plateau_increase(cum, 4, 5) == pytest.approx((17.0 - 16.0) / 17.0)
    assert plateau_increase(cum, 1, 5) == pytest.approx(1.0)
    assert plateau_increase(np.zeros(5), 2, 5) == 0.0


def test_first_day_below():
    e = np.array([[0.5, 0.01, 0.5], [0.04, 0.2, 0.5], [0.01, 0.01, 0.5]])
    np.testing.assert_array_equal(first_day_below(e, 0.05), [2, 1, 4])


def test_aggregate_runs():
    agg = aggregate_runs([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], quantiles=(0.5,))
    np.testing.assert_allclose(agg["mean"], [3.0, 4.0])
    np.testing.assert_allclose(agg["q50"], [3.0, 4.0])


def test_posterior_error():
    err, trace = posterior_error(WeightBelief(np.array([0.5, 1.0]), np.diag([0.1, 0.2])), [0.0, 1.5])
    np.testing.assert_allclose(err, [0.5, 0.5])
    assert trace == pytest.approx(0.3)
    with pytest.raises(ValueError):
        posterior_error(WeightBelief(np.zeros(2), np.eye(2)), [0.0])


def test_table_round_trip_keeps_full_precision(tmp_path):
    x = [0.1 + 0.2, 1 / 3, 1e-17]
    path = write_table(tmp_path / "t.csv", {"day": [1, 2, 3], "x": x})
    back = read_table(path)
    assert back["day"] == ["1", "2", "3"]
    assert [float(v) for v in back["x"]] == x
    with pytest.raises(ValueError):
        write_table(tmp_path / "u.csv", {"a": [1], "b": [1, 2]})


def test_zero_and_unconstrained_cases():
    econ = CommunityEconomics(spot_price=[1.0, 2.0], import_tariff=0.5, export_tariff=0.1,
                              violation_penalty=10.0, capacity_limit=np.inf, outside_cost=[0.0, 0.0])
    assert realized_cost(np.zeros((2, 2)), econ) == 0.0
    np.testing.assert_array_equal(violation_series(np.full((2, 2), 50.0), np.inf), [0.0, 0.0])
    # PV-only community: the cost is minus the export revenue
    pv = np.array([[0.0, 0.7], [0.2, 1.1]])
    assert realized_cost(-pv, econ) == pytest.approx(-(0.2 * 0.9 + 1.8 * 1.9))
    np.testing.assert_allclose(violation_series(np.array([[2.0, 1.0], [2.0, 0.5]]), 3.0), [1.0, 0.0])
