"""Lower-level signature models.

Each signature is a small LP ``min sum_t x_t p_t`` over a feasible set of
import/export profiles ``p``.  The feasible set is stored as a
:class:`ConstraintBlock` in the canonical form::

    A_eq z  = b_eq     (one lambda-family dual per row)
    G    z <= h        (one mu-family dual per row, mu >= 0)

with every decision variable free; variable bounds are written as ``G`` rows
so that each of them carries a dual.  Dual sign convention: stationarity reads
``c - A_eq^T lam + G^T mu = 0`` and the dual objective is
``b_eq . lam - h . mu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

__all__ = [
    "TimeGrid",
    "FlexBaseloadSpec",
    "PvSpec",
    "BatterySpec",
    "HeatPumpSpec",
    "EvSpec",
    "ConstraintBlock",
    "SignatureSolution",
    "InfeasibleSpecError",
    "SignatureSolveError",
    "build_flex_baseload",
    "build_pv",
    "build_battery",
    "build_heatpump",
    "build_ev",
    "solve_signature_lp",
    "check_feasible",
    "CachedLp",
]


class InfeasibleSpecError(ValueError):
    """Signature parameters describe an empty feasible set."""


class SignatureSolveError(RuntimeError):
    """A signature LP could not be solved to optimality."""


@dataclass(frozen=True)
class TimeGrid:
    horizon: int = 24
    period_duration: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")
        if not self.period_duration > 0:
            raise ValueError(f"period_duration must be > 0, got {self.period_duration}")


@dataclass(frozen=True)
class FlexBaseloadSpec:
    baseload: np.ndarray
    flex_window: tuple[int, ...]
    load_min: float
    load_max: float


@dataclass(frozen=True)
class PvSpec:
    reference_production: np.ndarray


@dataclass(frozen=True)
class BatterySpec:
    charge_max: float
    discharge_max: float  # negative bound
    energy_min: float
    energy_max: float
    energy_init: float


@dataclass(frozen=True)
class HeatPumpSpec:
    cop: float
    thermal_resistance: float
    thermal_capacity: float
    temp_init: float
    temp_min: float
    temp_max: float
    power_max: float


@dataclass(frozen=True)
class EvSpec:
    charge_max: float
    discharge_max: float  # negative bound
    soc_min: float
    soc_max: float
    soc_init: float
    plugged_in: np.ndarray
    drive_power: float


@dataclass(frozen=True, eq=False)
class ConstraintBlock:
    """Immutable LP feasible set of one signature."""

    kind: str
    name: str
    var_names: tuple[str, ...]
    link: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    eq_labels: tuple[str, ...]
    G: sp.csr_matrix
    h: np.ndarray
    ineq_labels: tuple[str, ...]

    def __post_init__(self):
        n = len(self.var_names)
        if self.A_eq.shape != (len(self.b_eq), n) or self.G.shape != (len(self.h), n):
            raise ValueError(f"{self.name}: inconsistent block dimensions")
        if len(self.eq_labels) != len(self.b_eq) or len(self.ineq_labels) != len(self.h):
            raise ValueError(f"{self.name}: every row needs exactly one dual label")
        for arr in (self.A_eq.data, self.b_eq, self.G.data, self.h):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{self.name}: non-finite coefficient")
        for arr in (self.link, self.b_eq, self.h):
            arr.setflags(write=False)

    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    @property
    def horizon(self) -> int:
        return len(self.link)

    def objective_vector(self, prices) -> np.ndarray:
        c = np.zeros(self.n_vars)
        c[self.link] = np.asarray(prices, dtype=float)
        return c

    def dual_objective(self, eq_duals, ineq_duals) -> float:
        return float(self.b_eq @ eq_duals - self.h @ ineq_duals)


@dataclass
class SignatureSolution:
    block: ConstraintBlock
    values: np.ndarray
    objective: float
    eq_duals: np.ndarray
    ineq_duals: np.ndarray

    @property
    def profile(self) -> np.ndarray:
        return self.values[self.block.link]

    @property
    def dual_objective(self) -> float:
        return self.block.dual_objective(self.eq_duals, self.ineq_duals)

    def duals(self) -> dict[str, float]:
        out = dict(zip(self.block.eq_labels, self.eq_duals))
        out.update(zip(self.block.ineq_labels, self.ineq_duals))
        return out


@dataclass
class _Rows:
    """Row accumulator used while building a block."""

    n_vars: int
    rows: list = field(default_factory=list)
    rhs: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def add(self, coefs: dict[int, float], rhs: float, label: str):
        self.rows.append(coefs)
        self.rhs.append(float(rhs))
        self.labels.append(label)

    def matrix(self) -> sp.csr_matrix:
        r, c, v = [], [], []
        for i, coefs in enumerate(self.rows):
            for j, a in coefs.items():
                r.append(i)
                c.append(j)
                v.append(a)
        return sp.csr_matrix((v, (r, c)), shape=(len(self.rows), self.n_vars))


def _finish(kind, name, var_names, link, eq: _Rows, ineq: _Rows) -> ConstraintBlock:
    return ConstraintBlock(
        kind=kind,
        name=name,
        var_names=tuple(var_names),
        link=np.asarray(link, dtype=int),
        A_eq=eq.matrix(),
        b_eq=np.asarray(eq.rhs, dtype=float),
        eq_labels=tuple(eq.labels),
        G=ineq.matrix(),
        h=np.asarray(ineq.rhs, dtype=float),
        ineq_labels=tuple(ineq.labels),
    )


def _vector(values, grid: TimeGrid, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (grid.horizon,):
        raise ValueError(f"{what} has shape {arr.shape}, expected ({grid.horizon},)")
    return arr


def _bounds(ineq: _Rows, j: int, lo: float, hi: float, family: str, t: int):
    ineq.add({j: -1.0}, -lo, f"{family}_lo[{t}]")
    ineq.add({j: 1.0}, hi, f"{family}_hi[{t}]")


def build_flex_baseload(spec: FlexBaseloadSpec, grid: TimeGrid, name: str = "baseload") -> ConstraintBlock:
    """Baseload that may be shifted inside ``flex_window`` at constant total energy.

    Variables are ``p[t]`` then ``l[t]``.
    """
    T = grid.horizon
    L = _vector(spec.baseload, grid, "baseload")
    window = sorted(set(int(t) for t in spec.flex_window))
    if any(t < 0 or t >= T for t in window):
        raise ValueError(f"{name}: flex window {window} outside [0, {T})")
    if spec.load_min < 0 or spec.load_min > L.min() + 1e-12 or spec.load_max < L.max() - 1e-12:
        raise InfeasibleSpecError(
            f"{name}: load bounds [{spec.load_min}, {spec.load_max}] do not contain the baseload"
            f" range [{L.min()}, {L.max()}]"
        )
    names = [f"p[{t}]" for t in range(T)] + [f"l[{t}]" for t in range(T)]
    eq, ineq = _Rows(2 * T), _Rows(2 * T)
    for t in range(T):
        eq.add({t: -1.0, T + t: 1.0}, 0.0, f"lambda1[{t}]")
    in_window = set(window)
    for t in range(T):
        if t not in in_window:
            eq.add({T + t: 1.0}, L[t], f"lambda2[{t}]")
    if window:
        eq.add({T + t: 1.0 for t in window}, float(L[window].sum()), "lambda3")
    for t in range(T):
        _bounds(ineq, T + t, spec.load_min, spec.load_max, "mu_L", t)
    return _finish("baseload", name, names, range(T), eq, ineq)


def build_pv(spec: PvSpec, grid: TimeGrid, name: str = "pv") -> ConstraintBlock:
    """Fixed PV export profile ``p = -PV``."""
    T = grid.horizon
    pv = _vector(spec.reference_production, grid, "reference_production")
    if np.any(pv < 0):
        raise InfeasibleSpecError(f"{name}: negative PV production")
    eq = _Rows(T)
    for t in range(T):
        eq.add({t: -1.0}, pv[t], f"lambda4[{t}]")
    return _finish("pv", name, [f"p[{t}]" for t in range(T)], range(T), eq, _Rows(T))


def build_battery(spec: BatterySpec, grid: TimeGrid, name: str = "battery") -> ConstraintBlock:
    """Lossless home battery with cyclic state of energy.

    Variables are ``p[t]``, ``b[t]`` (kW) and ``e[t]`` (kWh at the end of period t).
    """
    T, dt = grid.horizon, grid.period_duration
    if not spec.discharge_max <= 0 <= spec.charge_max:
        raise InfeasibleSpecError(f"{name}: need discharge_max <= 0 <= charge_max")
    if not spec.energy_min <= spec.energy_init <= spec.energy_max:
        raise InfeasibleSpecError(f"{name}: initial energy outside [energy_min, energy_max]")
    n = 3 * T
    P, B, E = 0, T, 2 * T
    names = [f"p[{t}]" for t in range(T)] + [f"b[{t}]" for t in range(T)] + [f"e[{t}]" for t in range(T)]
    eq, ineq = _Rows(n), _Rows(n)
    for t in range(T):
        eq.add({P + t: -1.0, B + t: dt}, 0.0, f"lambda5[{t}]")
    eq.add({E: -1.0, B: dt}, -spec.energy_init, "lambda6[0]")
    for t in range(1, T):
        eq.add({E + t - 1: 1.0, E + t: -1.0, B + t: dt}, 0.0, f"lambda6[{t}]")
    eq.add({E + T - 1: 1.0}, spec.energy_init, "lambda7")
    for t in range(T):
        _bounds(ineq, B + t, spec.discharge_max, spec.charge_max, "mu_B", t)
    for t in range(T):
        _bounds(ineq, E + t, spec.energy_min, spec.energy_max, "mu_E", t)
    return _finish("battery", name, names, range(T), eq, ineq)


def build_heatpump(
    spec: HeatPumpSpec,
    grid: TimeGrid,
    outdoor_temp,
    outdoor_temp_peak: float,
    name: str = "heatpump",
    check: bool = True,
) -> ConstraintBlock:
    """Single-zone heat pump with first-order thermal dynamics.

    Variables are ``p[t]``, ``q[t]`` (electric kW) and ``tau[t]`` (indoor degC).
    The indoor temperature must return to ``temp_init`` at the end of the day.
    """
    T, dt = grid.horizon, grid.period_duration
    tex = _vector(outdoor_temp, grid, "outdoor_temp")
    if not (spec.cop > 0 and spec.thermal_resistance > 0 and spec.thermal_capacity > 0):
        raise InfeasibleSpecError(f"{name}: cop, R and C must be positive")
    if spec.power_max < 0 or not spec.temp_min <= spec.temp_init <= spec.temp_max:
        raise InfeasibleSpecError(f"{name}: invalid power limit or comfort band")
    a = dt / (spec.thermal_resistance * spec.thermal_capacity)
    gain = spec.cop * dt / spec.thermal_capacity
    upper = max(spec.temp_max, float(outdoor_temp_peak))
    n = 3 * T
    P, Q, K = 0, T, 2 * T
    names = [f"p[{t}]" for t in range(T)] + [f"q[{t}]" for t in range(T)] + [f"tau[{t}]" for t in range(T)]
    eq, ineq = _Rows(n), _Rows(n)
    for t in range(T):
        eq.add({P + t: -1.0, Q + t: dt}, 0.0, f"lambda8[{t}]")
    eq.add({K: 1.0, Q: -gain}, (1 - a) * spec.temp_init + a * tex[0], "lambda9[0]")
    for t in range(1, T):
        eq.add({K + t: 1.0, K + t - 1: -(1 - a), Q + t: -gain}, a * tex[t], f"lambda9[{t}]")
    eq.add({K + T - 1: 1.0}, spec.temp_init, "lambda10")
    for t in range(T):
        _bounds(ineq, Q + t, 0.0, spec.power_max, "mu_TCL", t)
    for t in range(T):
        _bounds(ineq, K + t, spec.temp_min, upper, "mu_tau", t)
    block = _finish("heatpump", name, names, range(T), eq, ineq)
    if check:
        check_feasible(block)
    return block


def build_ev(spec: EvSpec, grid: TimeGrid, name: str = "ev", check: bool = True) -> ConstraintBlock:
    """Electric vehicle that can charge or discharge only while plugged in.

    Variables are ``p[t]``, ``v[t]`` (kW) and ``s[t]`` (kWh).  Each unplugged
    period drains ``drive_power * period_duration`` from the battery.
    """
    T, dt = grid.horizon, grid.period_duration
    U = _vector(spec.plugged_in, grid, "plugged_in")
    if not np.all((U == 0) | (U == 1)):
        raise ValueError(f"{name}: plugged_in must be binary")
    if not spec.discharge_max <= 0 <= spec.charge_max:
        raise InfeasibleSpecError(f"{name}: need discharge_max <= 0 <= charge_max")
    if not spec.soc_min <= spec.soc_init <= spec.soc_max or spec.drive_power < 0:
        raise InfeasibleSpecError(f"{name}: invalid state-of-charge range or drive power")
    drain = spec.drive_power * dt * (1 - U)
    if drain.sum() > spec.charge_max * dt * U.sum() + 1e-9:
        raise InfeasibleSpecError(
            f"{name}: daily drive energy {drain.sum():g} kWh cannot be recharged while plugged in"
        )
    n = 3 * T
    P, V, S = 0, T, 2 * T
    names = [f"p[{t}]" for t in range(T)] + [f"v[{t}]" for t in range(T)] + [f"s[{t}]" for t in range(T)]
    eq, ineq = _Rows(n), _Rows(n)
    for t in range(T):
        eq.add({P + t: -1.0, V + t: dt}, 0.0, f"lambda11[{t}]")
    eq.add({S: 1.0, V: -dt}, spec.soc_init - drain[0], "lambda12[0]")
    for t in range(1, T):
        eq.add({S + t: 1.0, S + t - 1: -1.0, V + t: -dt}, -drain[t], f"lambda12[{t}]")
    eq.add({S + T - 1: 1.0}, spec.soc_init, "lambda13")
    for t in range(T):
        _bounds(ineq, V + t, U[t] * spec.discharge_max, U[t] * spec.charge_max, "mu_EV", t)
    for t in range(T):
        _bounds(ineq, S + t, spec.soc_min, spec.soc_max, "mu_S", t)
    block = _finish("ev", name, names, range(T), eq, ineq)
    if check:
        check_feasible(block)
    return block


def _linprog(block: ConstraintBlock, c: np.ndarray):
    return linprog(
        c,
        A_ub=block.G if block.G.shape[0] else None,
        b_ub=block.h if block.G.shape[0] else None,
        A_eq=block.A_eq if block.A_eq.shape[0] else None,
        b_eq=block.b_eq if block.A_eq.shape[0] else None,
        bounds=(None, None),
        method="highs",
    )


def check_feasible(block: ConstraintBlock) -> None:
    """Raise :class:`InfeasibleSpecError` when the block admits no profile."""
    res = _linprog(block, np.zeros(block.n_vars))
    if res.status == 2:
        raise InfeasibleSpecError(f"{block.name}: feasible set is empty")
    if res.status != 0:
        raise SignatureSolveError(f"{block.name}: feasibility check failed ({res.message})")


def solve_signature_lp(block: ConstraintBlock, prices) -> SignatureSolution:
    """Minimise ``prices . p`` over the block and return primal and dual solutions."""
    prices = np.asarray(prices, dtype=float)
    if prices.shape != (block.horizon,):
        raise ValueError(f"{block.name}: prices have shape {prices.shape}, expected ({block.horizon},)")
    res = _linprog(block, block.objective_vector(prices))
    if res.status == 2:
        raise SignatureSolveError(f"{block.name}: infeasible")
    if res.status == 3:
        raise SignatureSolveError(f"{block.name}: unbounded")
    if res.status != 0:
        raise SignatureSolveError(f"{block.name}: {res.message}")
    lam = np.asarray(res.eqlin.marginals) if block.A_eq.shape[0] else np.zeros(0)
    mu = -np.asarray(res.ineqlin.marginals) if block.G.shape[0] else np.zeros(0)
    return SignatureSolution(block=block, values=res.x, objective=float(res.fun), eq_duals=lam, ineq_duals=mu)


class CachedLp:
    """Memoising wrapper around :func:`solve_signature_lp`.

    Keys are the block identity and the exact price bytes, so repeated solves
    of the same block at the same prices (audit, outside cost, responses)
    share one LP.  Call :meth:`clear` between days to bound memory.
    """

    def __init__(self, solver: Callable[[ConstraintBlock, np.ndarray], SignatureSolution] = solve_signature_lp):
        self.solver = solver
        self._memo: dict = {}
        self.hits = 0
        self.misses = 0

    def __call__(self, block: ConstraintBlock, prices) -> SignatureSolution:
        prices = np.ascontiguousarray(prices, dtype=float)
        key = (id(block), prices.tobytes())
        hit = self._memo.get(key)
        if hit is not None and hit[0] is block:
            self.hits += 1
            return hit[1]
        self.misses += 1
        sol = self.solver(block, prices)
        self._memo[key] = (block, sol)
        return sol

    def clear(self) -> None:
        self._memo.clear()
