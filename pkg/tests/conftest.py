"""Shared fixtures: one synthetic day, its blocks, and KKT helpers."""

import numpy as np
import pytest

from ecpricing.data import synth_exogenous
from ecpricing.environment import day_blocks, default_catalogue
from ecpricing.milp import MilpModel, SolveOptions, solve
from ecpricing.bilevel import BigMPolicy, bigm_linearize, derive_kkt


@pytest.fixture(scope="session")
def winter_day():
    return synth_exogenous(1, seed=3, n_prosumers=2)[0]


@pytest.fixture(scope="session")
def catalogue():
    return default_catalogue()


@pytest.fixture(scope="session")
def day_grid(catalogue, winter_day):
    """Blocks of both prosumers for every catalogue signature."""
    return day_blocks(catalogue, winter_day.baseload, winter_day)


def kkt_point(block, prices, policy=BigMPolicy()):
    """Any point satisfying the big-M KKT system of ``block`` at fixed prices.

    The objective is zero, so the solver is free to return any KKT point;
    LP duality says every such point is optimal.
    """
    m = MilpModel("kkt")
    x = m.add_vars([f"x{t}" for t in range(block.horizon)], prices, prices)
    kkt = derive_kkt(m, block, x, policy.dual)
    bigm_linearize(m, kkt, policy)
    m.seal()
    # a tight integrality tolerance limits leakage; HiGHS occasionally reports a false
    # infeasibility at 1e-9, so fall back to a looser one before giving up
    for tol in (1e-9, 1e-7, None):
        opts = SolveOptions(extra={} if tol is None else {"mip_feasibility_tolerance": tol})
        sol = solve(m, opts)
        if sol.optimal:
            break
    assert sol.optimal, sol.status
    # pin the switches and re-solve, removing integrality-tolerance leakage through big-M rows
    fixed = solve(m.fix_binaries(sol.values).seal(), opts)
    assert fixed.optimal, fixed.status
    v = fixed.values
    residual = float(np.max(np.abs(v[kkt.mu] * kkt.slacks(v)))) if len(kkt.mu) else 0.0
    return v[kkt.link], kkt.dual_objective(v), residual


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
