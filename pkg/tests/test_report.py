"""Convergence checks on constructed results and deterministic figures."""

from pathlib import Path

import numpy as np
import pytest

from ecpricing.config import config_from_dict
from ecpricing.experiment import run_experiment
from ecpricing.report import Results, RunData, check_results, kind_errors, render_report

KINDS = ["baseload", "pv", "battery", "heatpump", "ev"]


def fake_run(regret, errors, violation, ratio=0.001):
    days = len(regret)
    return RunData(run=0, regret=np.asarray(regret, float), cumulative=np.cumsum(regret),
                   violation=np.asarray(violation, float), clairvoyant_violation=np.zeros_like(violation),
                   errors=errors, means=np.zeros_like(errors), bigm_max_ratio=np.full(days, ratio),
                   payment_gap=np.zeros(days), complementarity_residual=np.zeros(days), resets=[[]] * days)


def errors_with_first_days(days, first):
    """Errors (days, 1 prosumer, 5 kinds) dropping to 0.01 on the given 1-based day per kind."""
    e = np.full((days, 1, 5), 0.2)
    for k, d in enumerate(first):
        e[d - 1:, 0, k] = 0.01
    return e


def results(runs, days, clair_violation=None):
    clair = {"violation": np.zeros(days) if clair_violation is None else clair_violation,
             "bigm_max_ratio": np.zeros(days)}
    return Results(Path("."), {"config": {"event": {"day": None}}}, KINDS, KINDS, runs, clair)


def test_plateau_check():
    days = 50
    viol = np.zeros((days, 2))
    flat = np.r_[100.0, np.full(days - 1, 0.01)]
    growing = np.r_[1.0, np.full(days - 1, 1.0)]
    e = errors_with_first_days(days, [1, 1, 2, 3, 2])
    assert check_results(results([fake_run(flat, e, viol)], days))["regret_plateau"]["passed"]
    c = check_results(results([fake_run(growing, e, viol)], days))["regret_plateau"]
    assert not c["passed"] and c["growth"] == pytest.approx(25 / 50)
    neg = flat.copy()
    neg[10] = -0.01
    assert not check_results(results([fake_run(neg, e, viol)], days))["regret_plateau"]["passed"]


def test_convergence_order_needs_four_of_five():
    days, viol, reg = 30, np.zeros((30, 1)), np.r_[10.0, np.zeros(29)]
    good = errors_with_first_days(days, [1, 1, 2, 5, 3])
    bad = errors_with_first_days(days, [1, 1, 9, 5, 3])  # battery after heat pump
    runs = [fake_run(reg, good, viol)] * 4 + [fake_run(reg, bad, viol)]
    c = check_results(results(runs, days))["convergence_order"]
    assert c["passed"] and c["runs_ordered"] == 4
    runs = [fake_run(reg, good, viol)] * 3 + [fake_run(reg, bad, viol)] * 2
    assert not check_results(results(runs, days))["convergence_order"]["passed"]
    stuck = good.copy()
    stuck[:, 0, 1] = 0.2  # PV never below 0.1
    assert not check_results(results([fake_run(reg, stuck, viol)], days))["convergence_order"]["passed"]


def test_violation_decay_and_clairvoyant_fallback():
    days, reg = 40, np.r_[10.0, np.zeros(39)]
    e = errors_with_first_days(days, [1] * 5)
    v = np.zeros((days, 2))
    v[0] = [5.0, 5.0]
    v[-20:] = 0.049  # just under 1% of day 1 per day
    assert check_results(results([fake_run(reg, e, v)], days))["violation_decay"]["passed"]
    v[-20:] = 0.06
    assert not check_results(results([fake_run(reg, e, v)], days))["violation_decay"]["passed"]
    none = np.zeros((days, 2))
    assert check_results(results([fake_run(reg, e, none)], days))["violation_decay"]["passed"]
    assert not check_results(results([fake_run(reg, e, none)], days, np.full(days, 0.1)))["violation_decay"]["passed"]


def test_bigm_check():
    days, reg = 5, np.ones(5)
    e = errors_with_first_days(days, [1] * 5)
    assert not check_results(results([fake_run(reg, e, np.zeros((5, 1)), ratio=0.995)], days))["bigm_audit"]["passed"]


def test_kind_errors_average_within_kind():
    e = np.zeros((1, 2, 3))
    e[0, :, 0], e[0, :, 1], e[0, :, 2] = 1.0, 3.0, 7.0
    out = kind_errors(e, ["a", "a", "b"])
    assert out["a"][0] == 2.0 and out["b"][0] == 7.0


def test_figures_are_deterministic(tmp_path):
    out, _ = run_experiment(config_from_dict({"prosumers": 2, "days": 2, "runs": 2, "plots": False}), tmp_path)
    render_report(out)
    first = {p.name: p.read_bytes() for p in (out / "figures").glob("*.svg")}
    assert set(first) == {"cumulative_regret.svg", "violation_heatmap.svg", "belief_error_boxplots.svg"}
    render_report(out)
    assert first == {p.name: p.read_bytes() for p in (out / "figures").glob("*.svg")}
    assert (out / "summary.csv").exists() and (out / "checks.json").exists()
    render_report(out, "pdf")
    assert (out / "figures" / "cumulative_regret.pdf").exists()


def paired(finals_reset, finals_base, event=5, days=40, tail_rate=0.0):
    """Reset and baseline result sets whose cumulative regret ends at the given values."""
    e = errors_with_first_days(days, [1] * 5)
    v = np.zeros((days, 1))

    def run(i, final, rate):
        reg = np.zeros(days)
        reg[0] = final - rate * (days - event)
        reg[event - 1:] += rate
        r = fake_run(reg, e, v)
        r.run = i
        return r

    meta = {"config": {"event": {"day": event}}}
    reset = Results(Path("."), meta, KINDS, KINDS, [run(i, f, tail_rate) for i, f in enumerate(finals_reset)], {})
    base = Results(Path("."), meta, KINDS, KINDS, [run(i, f, 0.0) for i, f in enumerate(finals_base)], {})
    return reset, base


def test_compare_reset_counts_seeds():
    from ecpricing.report import compare_reset

    reset, base = paired([1, 1, 1, 1, 5], [2, 2, 2, 2, 2])
    c = compare_reset(reset, base)
    assert c["passed"] and c["runs_lower"] == 4
    reset, base = paired([1, 1, 1, 5, 5], [2, 2, 2, 2, 2])
    assert not compare_reset(reset, base)["passed"]


def test_compare_reset_needs_post_event_plateau():
    from ecpricing.report import compare_reset

    # constant post-event regret never plateaus: 20 of 36 post-event days is 56% of the increment
    reset, base = paired([10] * 5, [20] * 5, tail_rate=0.1)
    c = compare_reset(reset, base)
    assert not c["passed"] and c["post_event_growth"] == pytest.approx(20 / 36)
