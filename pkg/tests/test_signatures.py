"""Signature LP blocks checked against brute-force and closed-form oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ecpricing.signatures import (
    BatterySpec,
    CachedLp,
    EvSpec,
    FlexBaseloadSpec,
    HeatPumpSpec,
    InfeasibleSpecError,
    PvSpec,
    SignatureSolveError,
    TimeGrid,
    build_battery,
    build_ev,
    build_flex_baseload,
    build_heatpump,
    build_pv,
    solve_signature_lp,
)

G3 = TimeGrid(3)
G2 = TimeGrid(2)
G24 = TimeGrid()


def desk_blocks():
    rng = np.random.default_rng(5)
    L = 0.3 + rng.random(24)
    tex = 2 + 4 * np.sin(np.linspace(0, np.pi, 24))
    plugged = np.ones(24)
    plugged[8:17] = 0
    return [
        build_flex_baseload(FlexBaseloadSpec(L, tuple(range(6, 10)), L.min(), L.max()), G24),
        build_pv(PvSpec(np.clip(np.sin(np.linspace(-1, 4, 24)), 0, None)), G24),
        build_battery(BatterySpec(3, -3, 1, 10, 5), G24),
        build_heatpump(HeatPumpSpec(3, 10, 3, 20, 19, 21, 3), G24, tex, tex.max()),
        build_ev(EvSpec(6, -6, 5, 40, 20, plugged, 1.5), G24),
    ]


# --- flexible baseload -------------------------------------------------------

def test_baseload_toy_matches_vertex_enumeration():
    block = build_flex_baseload(FlexBaseloadSpec(np.ones(3), (0, 1, 2), 0.0, 2.0), G3)
    x = np.array([3.0, 1.0, 2.0])
    sol = solve_signature_lp(block, x)
    # oracle: every load vector on a 0.5 grid with bounds [0, 2] and total 3
    grid = np.arange(0, 2.01, 0.5)
    best = min((x @ np.array(l), l) for l in itertools.product(grid, repeat=3) if abs(sum(l) - 3) < 1e-12)
    assert sol.objective == pytest.approx(best[0], abs=1e-9) == 4.0
    np.testing.assert_allclose(sol.profile, [0.0, 2.0, 1.0], atol=1e-9)


def test_baseload_without_window_is_price_invariant():
    L = np.array([0.5, 1.0, 0.7])
    block = build_flex_baseload(FlexBaseloadSpec(L, (), 0.0, 2.0), G3)
    for x in ([1, 2, 3], [3, 0, 1], [0, 0, 0]):
        np.testing.assert_allclose(solve_signature_lp(block, x).profile, L, atol=1e-12)


def test_baseload_flat_prices_cost_equals_base_energy():
    L = np.array([0.5, 1.0, 0.7])
    block = build_flex_baseload(FlexBaseloadSpec(L, (0, 1, 2), 0.0, 2.0), G3)
    assert solve_signature_lp(block, [2.0, 2.0, 2.0]).objective == pytest.approx(2.0 * L.sum())


def test_baseload_bounds_must_contain_baseload():
    with pytest.raises(InfeasibleSpecError):
        build_flex_baseload(FlexBaseloadSpec(np.array([1.0, 3.0, 1.0]), (0,), 0.0, 2.0), G3)
    with pytest.raises(ValueError):
        build_flex_baseload(FlexBaseloadSpec(np.ones(3), (5,), 0.0, 2.0), G3)


# --- PV ----------------------------------------------------------------------

def test_pv_profile_is_fixed():
    block = build_pv(PvSpec(np.array([0.0, 1.0, 2.0])), G3)
    sol = solve_signature_lp(block, [1.0, 1.0, 1.0])
    assert sol.objective == pytest.approx(-3.0)
    np.testing.assert_allclose(sol.profile, [0, -1, -2])
    np.testing.assert_allclose(solve_signature_lp(build_pv(PvSpec(np.zeros(3)), G3), [5, 1, 2]).profile, 0)


def test_pv_rejects_bad_input():
    with pytest.raises(InfeasibleSpecError):
        build_pv(PvSpec(np.array([0.0, -1.0, 0.0])), G3)
    with pytest.raises(ValueError):
        build_pv(PvSpec(np.zeros(4)), G3)


# --- battery -----------------------------------------------------------------

def test_battery_two_period_toy():
    block = build_battery(BatterySpec(1.0, -1.0, 0.0, 2.0, 1.0), G2)
    x = np.array([2.0, 1.0])
    # oracle: the terminal condition forces b2 = -b1; enumerate b1 on a fine grid
    cands = [(x @ np.array([b1, -b1]), b1) for b1 in np.linspace(-1, 1, 201)]
    best = min(cands)
    sol = solve_signature_lp(block, x)
    assert sol.objective == pytest.approx(best[0]) == pytest.approx(-1.0)
    np.testing.assert_allclose(sol.profile, [-1.0, 1.0], atol=1e-9)


def test_battery_frozen_and_flat_prices():
    frozen = build_battery(BatterySpec(0.0, 0.0, 0.0, 10.0, 5.0), G24)
    np.testing.assert_allclose(solve_signature_lp(frozen, np.arange(24.0)).profile, 0.0, atol=1e-12)
    free = build_battery(BatterySpec(3.0, -3.0, 1.0, 10.0, 5.0), G24)
    assert solve_signature_lp(free, np.full(24, 1.7)).objective == pytest.approx(0.0, abs=1e-9)


def test_battery_invalid_spec():
    with pytest.raises(InfeasibleSpecError):
        build_battery(BatterySpec(1.0, 1.0, 0.0, 2.0, 1.0), G2)
    with pytest.raises(InfeasibleSpecError):
        build_battery(BatterySpec(1.0, -1.0, 0.0, 2.0, 3.0), G2)


# --- heat pump ---------------------------------------------------------------

def test_heatpump_two_period_toy_closed_form():
    # R*C = 2 and cop/C = 1: tau1 = 15 + q1, tau2 = 12.5 + q1/2 + q2 = 20
    spec = HeatPumpSpec(cop=2.0, thermal_resistance=1.0, thermal_capacity=2.0, temp_init=20.0,
                        temp_min=19.0, temp_max=21.0, power_max=10.0)
    block = build_heatpump(spec, G2, np.array([10.0, 10.0]), 10.0)
    sol = solve_signature_lp(block, [1.0, 2.0])
    q1 = sol.profile[0]
    assert 4.0 - 1e-9 <= q1 <= 6.0 + 1e-9
    assert sol.profile[1] == pytest.approx(7.5 - 0.5 * q1)
    # cost q1 + 2 q2 = 15 whatever q1 is
    assert sol.objective == pytest.approx(15.0)


def test_heatpump_equilibrium_needs_no_power():
    spec = HeatPumpSpec(3.0, 10.0, 3.0, 20.0, 20.0, 20.0, 3.0)
    block = build_heatpump(spec, G24, np.full(24, 20.0), 20.0)
    np.testing.assert_allclose(solve_signature_lp(block, np.linspace(1, 2, 24)).profile, 0.0, atol=1e-9)


def test_heatpump_higher_cop_never_costs_more():
    tex = np.full(24, 0.0)
    x = np.linspace(1, 3, 24)
    costs = [solve_signature_lp(build_heatpump(HeatPumpSpec(c, 10, 3, 20, 19, 21, 5), G24, tex, 0.0), x).objective
             for c in (2.0, 3.0, 4.5)]
    assert costs[0] >= costs[1] >= costs[2]


def test_heatpump_too_weak_is_reported():
    spec = HeatPumpSpec(3.0, 10.0, 3.0, 20.0, 19.0, 21.0, 0.1)
    with pytest.raises(InfeasibleSpecError):
        build_heatpump(spec, G24, np.full(24, -10.0), -10.0)


# --- EV ----------------------------------------------------------------------

def test_ev_three_period_toy():
    spec = EvSpec(1.0, -1.0, 0.0, 10.0, 5.0, np.array([1.0, 0.0, 1.0]), 1.0)
    block = build_ev(spec, G3)
    x = np.array([1.0, 5.0, 2.0])
    # oracle: v0 + v2 = 1 with v in [-1, 1], v1 = 0
    best = min(x[0] * v0 + x[2] * (1 - v0) for v0 in np.linspace(0, 1, 101))
    sol = solve_signature_lp(block, x)
    assert sol.objective == pytest.approx(best) == pytest.approx(1.0)
    np.testing.assert_allclose(sol.profile, [1.0, 0.0, 0.0], atol=1e-9)


def test_ev_never_connected():
    spec = EvSpec(6.0, -6.0, 5.0, 40.0, 20.0, np.zeros(24), 0.0)
    np.testing.assert_allclose(solve_signature_lp(build_ev(spec, G24), np.arange(24.0)).profile, 0.0, atol=1e-12)


def test_ev_flat_prices_and_unrechargeable_day():
    spec = EvSpec(6.0, -6.0, 5.0, 40.0, 20.0, np.ones(24), 0.0)
    assert solve_signature_lp(build_ev(spec, G24), np.full(24, 2.0)).objective == pytest.approx(0.0, abs=1e-9)
    plugged = np.zeros(24)
    plugged[0] = 1
    with pytest.raises(InfeasibleSpecError):
        build_ev(EvSpec(1.0, -1.0, 0.0, 40.0, 20.0, plugged, 1.0), G24)


# --- properties --------------------------------------------------------------

def test_terminal_state_conservation():
    blocks = desk_blocks()
    x = np.random.default_rng(0).uniform(0, 4, 24)
    assert solve_signature_lp(blocks[2], x).profile.sum() == pytest.approx(0.0, abs=1e-8)
    ev = solve_signature_lp(blocks[4], x).profile.sum()
    assert ev == pytest.approx(9 * 1.5, abs=1e-8)  # 9 absent hours of drive drain


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4), st.lists(st.floats(0, 10), min_size=24, max_size=24))
def test_strong_duality(k, prices):
    block = desk_blocks()[k]
    sol = solve_signature_lp(block, prices)
    assert sol.dual_objective == pytest.approx(sol.objective, rel=1e-6, abs=1e-6)
    assert np.all(sol.ineq_duals >= -1e-7)


@pytest.mark.parametrize("k", range(5))
def test_scaling_prices_scales_objective(k):
    block = desk_blocks()[k]
    x = np.random.default_rng(k).uniform(0.5, 3, 24)
    assert solve_signature_lp(block, 2.5 * x).objective == pytest.approx(2.5 * solve_signature_lp(block, x).objective)


def test_every_row_has_a_dual_label():
    for block in desk_blocks():
        assert len(block.eq_labels) == block.A_eq.shape[0]
        assert len(block.ineq_labels) == block.G.shape[0]
        assert all(lbl.startswith(("lambda", "mu_")) for lbl in block.eq_labels + block.ineq_labels)


def test_wrong_price_length():
    with pytest.raises(ValueError):
        solve_signature_lp(desk_blocks()[0], np.ones(3))


def test_cached_lp_reuses_solutions():
    block = desk_blocks()[2]
    lp = CachedLp()
    x = np.linspace(1, 2, 24)
    a, b = lp(block, x), lp(block, x.copy())
    assert a is b and lp.hits == 1 and lp.misses == 1
    lp.clear()
    assert lp(block, x) is not a
