"""Solver-agnostic MILP container, LP-format export and HiGHS backends."""

from __future__ import annotations

import logging
import math
import os
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

__all__ = [
    "MilpModel",
    "MilpSolution",
    "SolveOptions",
    "MilpError",
    "solve",
    "export_lp",
    "audit_solution",
    "BACKENDS",
]

FEAS_TOL = 1e-6


class MilpError(RuntimeError):
    """Backend failure; ``export_path`` points at the LP file written for post-mortem."""

    def __init__(self, message: str, export_path: str | None = None):
        super().__init__(message if export_path is None else f"{message} (model written to {export_path})")
        self.export_path = export_path


class MilpModel:
    """Mixed-integer linear program built incrementally, then sealed.

    Variables are addressed by integer index.  Constraints are sparse rows
    ``lo <= a.x <= hi``; the sense is recovered from which side is infinite.
    """

    def __init__(self, name: str = "model"):
        self.name = name
        self._names: list[str] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._binary: list[bool] = []
        self._rows_r: list[np.ndarray] = []
        self._rows_c: list[np.ndarray] = []
        self._rows_v: list[np.ndarray] = []
        self._row_lo: list[float] = []
        self._row_hi: list[float] = []
        self.row_names: list[str] = []
        self._obj: dict[int, float] = {}
        self.objective_constant = 0.0
        self.sealed = False
        self._cache = None

    # -- building -------------------------------------------------------
    def _check_open(self):
        if self.sealed:
            raise RuntimeError(f"model {self.name!r} is sealed")

    def add_var(self, name: str, lb: float = 0.0, ub: float = math.inf, binary: bool = False) -> int:
        return int(self.add_vars([name], lb, ub, binary)[0])

    def add_vars(self, names, lb=0.0, ub=math.inf, binary: bool = False) -> np.ndarray:
        self._check_open()
        names = list(names)
        n = len(names)
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (n,))
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (n,))
        if np.any(np.isnan(lb)) or np.any(np.isnan(ub)):
            raise ValueError("NaN variable bound")
        if binary and (np.any(lb < 0) or np.any(ub > 1)):
            raise ValueError("binary variables need bounds within [0, 1]")
        start = len(self._names)
        self._names.extend(names)
        self._lb.extend(lb.tolist())
        self._ub.extend(ub.tolist())
        self._binary.extend([binary] * n)
        return np.arange(start, start + n)

    def set_bounds(self, index: int, lb: float | None = None, ub: float | None = None):
        self._check_open()
        if lb is not None:
            self._lb[index] = float(lb)
        if ub is not None:
            self._ub[index] = float(ub)

    def add_row(self, coefs: dict[int, float], sense: str, rhs: float, name: str) -> int:
        idx = np.fromiter(coefs.keys(), dtype=int, count=len(coefs))
        val = np.fromiter(coefs.values(), dtype=float, count=len(coefs))
        return int(self.add_triplets(np.zeros(len(idx), dtype=int), idx, val, sense, [rhs], [name])[0])

    def add_rows(self, A, sense: str, rhs, names) -> np.ndarray:
        """Append rows ``A x (sense) rhs`` where ``A`` is indexed by model variables."""
        A = sp.coo_matrix(A)
        if A.shape[1] > self.n_vars:
            raise ValueError("row references an unknown variable")
        return self.add_triplets(A.row, A.col, A.data, sense, np.broadcast_to(rhs, (A.shape[0],)), names)

    def add_triplets(self, rows, cols, vals, sense: str, rhs, names) -> np.ndarray:
        """Append ``len(rhs)`` rows given as (local row, variable, coefficient) triplets."""
        self._check_open()
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        vals = np.asarray(vals, dtype=float)
        rhs = np.asarray(rhs, dtype=float).reshape(-1)
        m = len(rhs)
        names = list(names)
        if len(names) != m:
            raise ValueError("one name per row required")
        if len(cols) and (cols.min() < 0 or cols.max() >= self.n_vars):
            raise ValueError("row references an unknown variable")
        if len(rows) and (rows.min() < 0 or rows.max() >= m):
            raise ValueError("row index out of range")
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(rhs))):
            raise ValueError("non-finite constraint coefficient")
        if sense in ("<=", "L"):
            lo, hi = np.full(m, -np.inf), rhs
        elif sense in (">=", "G"):
            lo, hi = rhs, np.full(m, np.inf)
        elif sense in ("=", "==", "E"):
            lo, hi = rhs, rhs
        else:
            raise ValueError(f"unknown sense {sense!r}")
        start = len(self._row_lo)
        self._rows_r.append(rows + start)
        self._rows_c.append(cols)
        self._rows_v.append(vals)
        self._row_lo.extend(lo.tolist())
        self._row_hi.extend(hi.tolist())
        self.row_names.extend(names)
        return np.arange(start, start + m)

    def add_objective(self, coefs: dict[int, float] | None = None, indices=None, values=None):
        self._check_open()
        items = coefs.items() if coefs is not None else zip(np.asarray(indices).tolist(), np.asarray(values).tolist())
        for j, v in items:
            if not math.isfinite(v):
                raise ValueError("non-finite objective coefficient")
            self._obj[int(j)] = self._obj.get(int(j), 0.0) + float(v)

    def seal(self) -> "MilpModel":
        for j in self._obj:
            if j >= self.n_vars:
                raise ValueError("objective references an unknown variable")
        self.sealed = True
        self._cache = None
        return self

    # -- views ----------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self._names)

    @property
    def n_rows(self) -> int:
        return len(self._row_lo)

    @property
    def var_names(self) -> list[str]:
        return self._names

    @property
    def lb(self) -> np.ndarray:
        return np.asarray(self._lb)

    @property
    def ub(self) -> np.ndarray:
        return np.asarray(self._ub)

    @property
    def is_binary(self) -> np.ndarray:
        return np.asarray(self._binary, dtype=bool)

    @property
    def n_binaries(self) -> int:
        return int(sum(self._binary))

    @property
    def row_lo(self) -> np.ndarray:
        return np.asarray(self._row_lo)

    @property
    def row_hi(self) -> np.ndarray:
        return np.asarray(self._row_hi)

    @property
    def c(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, v in self._obj.items():
            c[j] = v
        return c

    def matrix(self) -> sp.csr_matrix:
        if self._cache is not None:
            return self._cache
        if self._rows_r:
            r = np.concatenate(self._rows_r)
            cidx = np.concatenate(self._rows_c)
            v = np.concatenate(self._rows_v)
        else:
            r = cidx = np.zeros(0, dtype=int)
            v = np.zeros(0)
        A = sp.csr_matrix((v, (r, cidx)), shape=(self.n_rows, self.n_vars))
        A.sum_duplicates()
        if self.sealed:
            self._cache = A
        return A

    def objective_value(self, x) -> float:
        return float(self.c @ np.asarray(x)) + self.objective_constant

    def copy(self, name: str | None = None) -> "MilpModel":
        """Unsealed deep copy, e.g. to add rows to a solved model."""
        m = MilpModel(name or self.name)
        m._names = list(self._names)
        m._lb = list(self._lb)
        m._ub = list(self._ub)
        m._binary = list(self._binary)
        m._rows_r = list(self._rows_r)
        m._rows_c = list(self._rows_c)
        m._rows_v = list(self._rows_v)
        m._row_lo = list(self._row_lo)
        m._row_hi = list(self._row_hi)
        m.row_names = list(self.row_names)
        m._obj = dict(self._obj)
        m.objective_constant = self.objective_constant
        return m

    def fix_binaries(self, x, name: str | None = None) -> "MilpModel":
        """Continuous copy with every binary pinned to its rounded value in ``x``."""
        m = self.copy(name or f"{self.name}_fixed")
        for j in np.nonzero(self.is_binary)[0]:
            v = float(round(x[j]))
            m._lb[j] = m._ub[j] = v
            m._binary[j] = False
        return m

    def relaxed(self, name: str | None = None) -> "MilpModel":
        """Continuous relaxation: binaries become variables in [0, 1]."""
        m = self.copy(name or f"{self.name}_relaxed")
        m._binary = [False] * len(m._binary)
        return m


@dataclass
class SolveOptions:
    backend: str = "highs"
    time_limit: float = 120.0
    mip_rel_gap: float = 1e-6
    mip_abs_gap: float = 1e-6
    seed: int = 0
    threads: int = 1
    diagnostics_dir: str | None = None
    log: bool = False
    solver_path: str | None = None  # executable for the "highs-cli" backend
    extra: dict = field(default_factory=dict)  # raw backend options


@dataclass
class MilpSolution:
    status: str  # optimal | infeasible | unbounded | limit-reached | error
    values: np.ndarray | None = None
    objective_value: float = math.nan
    gap: float = math.nan
    message: str = ""
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def audit_solution(model: MilpModel, x, tol: float = FEAS_TOL) -> list[str]:
    """Independent row-by-row feasibility check; returns human-readable violations."""
    x = np.asarray(x, dtype=float)
    problems = []
    ax = model.matrix() @ x
    lo, hi = model.row_lo, model.row_hi
    scale = 1.0 + np.abs(np.where(np.isfinite(hi), hi, 0.0)) + np.abs(np.where(np.isfinite(lo), lo, 0.0))
    bad = np.where((ax < lo - tol * scale) | (ax > hi + tol * scale))[0]
    for i in bad[:20]:
        problems.append(f"row {model.row_names[i]}: {ax[i]:.9g} not in [{lo[i]:.9g}, {hi[i]:.9g}]")
    vb = np.where((x < model.lb - tol) | (x > model.ub + tol))[0]
    for j in vb[:20]:
        problems.append(f"var {model.var_names[j]}: {x[j]:.9g} not in [{model.lb[j]:.9g}, {model.ub[j]:.9g}]")
    binv = model.is_binary
    frac = np.abs(x[binv] - np.round(x[binv]))
    if frac.size and frac.max() > 1e-5:
        problems.append(f"binary integrality violated by {frac.max():.3g}")
    return problems


# -- LP format ---------------------------------------------------------------

def _num(v: float) -> str:
    if v == math.inf:
        return "+inf"
    if v == -math.inf:
        return "-inf"
    return repr(float(v))


def _terms(cols, vals, names) -> str:
    parts = []
    for j, v in zip(cols, vals):
        if v == 0:
            continue
        sign = "-" if v < 0 else "+"
        parts.append(f"{sign} {_num(abs(v))} {names[j]}")
    if not parts:
        return "0 " + names[0] if names else ""
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else text


def export_lp(model: MilpModel) -> str:
    """Render the model in CPLEX LP text format."""
    names = model.var_names
    lines = [f"\\ Problem: {model.name}", "Minimize"]
    c = model.c
    nz = np.nonzero(c)[0]
    lines.append(" obj: " + (_terms(nz, c[nz], names) if len(nz) else ("0 " + names[0] if names else "")))
    lines.append("Subject To")
    A = model.matrix()
    lo, hi = model.row_lo, model.row_hi
    for i in range(model.n_rows):
        start, end = A.indptr[i], A.indptr[i + 1]
        expr = _terms(A.indices[start:end], A.data[start:end], names) if end > start else ("0 " + names[0])
        rn = model.row_names[i]
        if lo[i] == hi[i]:
            lines.append(f" {rn}: {expr} = {_num(hi[i])}")
        elif np.isfinite(lo[i]) and np.isfinite(hi[i]):
            lines.append(f" {rn}_lo: {expr} >= {_num(lo[i])}")
            lines.append(f" {rn}_hi: {expr} <= {_num(hi[i])}")
        elif np.isfinite(hi[i]):
            lines.append(f" {rn}: {expr} <= {_num(hi[i])}")
        elif np.isfinite(lo[i]):
            lines.append(f" {rn}: {expr} >= {_num(lo[i])}")
    lines.append("Bounds")
    binary = model.is_binary
    for j, name in enumerate(names):
        if binary[j]:
            lines.append(f" {_num(model.lb[j])} <= {name} <= {_num(model.ub[j])}")
        elif model.lb[j] == -math.inf and model.ub[j] == math.inf:
            lines.append(f" {name} free")
        else:
            lines.append(f" {_num(model.lb[j])} <= {name} <= {_num(model.ub[j])}")
    lines.append("Binaries")
    bins = [names[j] for j in np.nonzero(binary)[0]]
    for k in range(0, len(bins), 8):
        lines.append(" " + " ".join(bins[k:k + 8]))
    lines.append("End")
    return "\n".join(lines) + "\n"


def write_lp(model: MilpModel, directory: str | os.PathLike | None, stem: str | None = None) -> str:
    directory = Path(directory) if directory else Path(tempfile.mkdtemp(prefix="ecpricing-"))
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{stem or model.name}.lp"
    path.write_text(export_lp(model))
    return str(path)


# -- backends ----------------------------------------------------------------

def _solve_highs(model: MilpModel, opts: SolveOptions, start=None, lp_path: str | None = None) -> MilpSolution:
    import highspy

    h = highspy.Highs()
    h.setOptionValue("output_flag", bool(opts.log))
    h.setOptionValue("time_limit", float(opts.time_limit))
    h.setOptionValue("mip_rel_gap", float(opts.mip_rel_gap))
    h.setOptionValue("mip_abs_gap", float(opts.mip_abs_gap))
    h.setOptionValue("random_seed", int(opts.seed))
    h.setOptionValue("threads", int(opts.threads))
    for key, value in opts.extra.items():
        h.setOptionValue(key, value)
    if lp_path is not None:
        status = h.readModel(lp_path)
        if status == highspy.HighsStatus.kError:
            raise MilpError(f"backend could not parse {lp_path}", lp_path)
    else:
        A = model.matrix().tocsc()
        lp = highspy.HighsLp()
        lp.num_col_ = model.n_vars
        lp.num_row_ = model.n_rows
        lp.col_cost_ = model.c
        lp.col_lower_ = model.lb
        lp.col_upper_ = model.ub
        lp.row_lower_ = model.row_lo
        lp.row_upper_ = model.row_hi
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = A.indptr
        lp.a_matrix_.index_ = A.indices
        lp.a_matrix_.value_ = A.data
        lp.offset_ = model.objective_constant
        if model.n_binaries:
            lp.integrality_ = [highspy.HighsVarType.kInteger if b else highspy.HighsVarType.kContinuous
                               for b in model.is_binary]
        h.passModel(lp)
        if start is not None and model.n_binaries:
            hs = highspy.HighsSolution()
            hs.col_value = np.asarray(start, dtype=float).tolist()
            hs.value_valid = True
            h.setSolution(hs)
    h.run()
    ms = h.getModelStatus()
    MS = highspy.HighsModelStatus
    info = h.getInfo()
    if ms == MS.kOptimal:
        values = np.asarray(h.getSolution().col_value, dtype=float)
        if lp_path is not None:
            values = _reorder_by_name(h, model, values)
        gap = float(info.mip_gap) if model.n_binaries else 0.0
        return MilpSolution("optimal", values, float(info.objective_function_value), gap,
                            info={"mip_node_count": int(getattr(info, "mip_node_count", 0))})
    if ms == MS.kInfeasible:
        return MilpSolution("infeasible", message="infeasible")
    if ms in (MS.kUnbounded, MS.kUnboundedOrInfeasible):
        return MilpSolution("unbounded" if ms == MS.kUnbounded else "infeasible", message=str(ms))
    if ms in (MS.kTimeLimit, MS.kIterationLimit, MS.kSolutionLimit, MS.kInterrupt):
        return MilpSolution("limit-reached", message=str(ms))
    return MilpSolution("error", message=str(ms))


def _reorder_by_name(h, model: MilpModel, values: np.ndarray) -> np.ndarray:
    lp = h.getLp()
    pos = {name: i for i, name in enumerate(lp.col_names_)}
    out = np.zeros(model.n_vars)
    for j, name in enumerate(model.var_names):
        if name in pos:
            out[j] = values[pos[name]]
    return out


def _solve_scipy(model: MilpModel, opts: SolveOptions, start=None) -> MilpSolution:
    from scipy.optimize import Bounds, LinearConstraint, milp

    constraints = [LinearConstraint(model.matrix(), model.row_lo, model.row_hi)] if model.n_rows else []
    res = milp(
        model.c,
        constraints=constraints,
        integrality=model.is_binary.astype(int),
        bounds=Bounds(model.lb, model.ub),
        options={"time_limit": opts.time_limit, "mip_rel_gap": opts.mip_rel_gap, "disp": False},
    )
    if res.status == 0:
        gap = float(getattr(res, "mip_gap", 0.0) or 0.0)
        return MilpSolution("optimal", np.asarray(res.x), float(res.fun) + model.objective_constant, gap)
    mapping = {1: "limit-reached", 2: "infeasible", 3: "unbounded"}
    return MilpSolution(mapping.get(res.status, "error"), message=res.message)


_CLI_STATUS = {
    "Optimal": "optimal",
    "Infeasible": "infeasible",
    "Unbounded": "unbounded",
    "Primal infeasible or unbounded": "infeasible",
    "Time limit reached": "limit-reached",
    "Iteration limit reached": "limit-reached",
}


def _solve_cli(model: MilpModel, opts: SolveOptions, start=None) -> MilpSolution:
    """Run an external HiGHS executable on the exported LP file."""
    exe = opts.solver_path
    if not exe:
        raise MilpError("backend 'highs-cli' needs a solver executable (set ECPRICING_SOLVER_PATH)")
    with tempfile.TemporaryDirectory(prefix="ecpricing-") as tmp:
        lp_path = write_lp(model, tmp, "model")
        sol_path = Path(tmp) / "model.sol"
        opt_path = Path(tmp) / "options.txt"
        opt_path.write_text(
            f"time_limit = {float(opts.time_limit)!r}\n"
            f"mip_rel_gap = {float(opts.mip_rel_gap)!r}\n"
            f"mip_abs_gap = {float(opts.mip_abs_gap)!r}\n"
            f"random_seed = {int(opts.seed)}\n"
            f"threads = {int(opts.threads)}\n"
        )
        try:
            proc = subprocess.run(
                [exe, "--model_file", lp_path, "--options_file", str(opt_path), "--solution_file", str(sol_path)],
                capture_output=True, text=True, timeout=float(opts.time_limit) + 60.0,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise MilpError(f"could not run solver executable {exe!r}: {exc}") from exc
        if not sol_path.exists():
            raise MilpError(f"solver executable {exe!r} wrote no solution (exit {proc.returncode}): "
                            f"{proc.stderr.strip()[-300:]}")
        lines = sol_path.read_text().splitlines()
    status_text = lines[lines.index("Model status") + 1].strip() if "Model status" in lines else "?"
    status = _CLI_STATUS.get(status_text, "error")
    if status != "optimal":
        return MilpSolution(status, message=status_text)
    pos = {name: j for j, name in enumerate(model.var_names)}
    values = np.zeros(model.n_vars)
    i = next(k for k, line in enumerate(lines) if line.startswith("# Columns"))
    for line in lines[i + 1:i + 1 + int(lines[i].split()[-1])]:
        name, val = line.rsplit(maxsplit=1)
        values[pos[name]] = float(val)
    return MilpSolution("optimal", values, model.objective_value(values), math.nan,
                        message="gap not reported by the executable")


BACKENDS: dict[str, Callable[..., MilpSolution]] = {
    "highs": _solve_highs,
    "highs-cli": _solve_cli,
    "scipy": _solve_scipy,
}


def solve(model: MilpModel, options: SolveOptions | None = None, start=None) -> MilpSolution:
    """Solve with the configured backend and audit any optimal answer in-process.

    ``start`` is an optional full assignment offered to the backend as an
    initial incumbent (ignored by backends without MIP-start support).
    """
    opts = options or SolveOptions()
    if not model.sealed:
        model.seal()
    backend = os.environ.get("ECPRICING_BACKEND", opts.backend)
    if os.environ.get("ECPRICING_THREADS"):
        opts = replace(opts, threads=int(os.environ["ECPRICING_THREADS"]))
    if os.environ.get("ECPRICING_SOLVER_PATH"):
        opts = replace(opts, solver_path=os.environ["ECPRICING_SOLVER_PATH"])
    try:
        fn = BACKENDS[backend]
    except KeyError:
        raise MilpError(f"unknown MILP backend {backend!r}; choose from {sorted(BACKENDS)}") from None
    try:
        sol = fn(model, opts, start)
    except MilpError:
        raise
    except Exception as exc:  # backend crash
        path = write_lp(model, opts.diagnostics_dir)
        raise MilpError(f"backend {backend!r} failed on {model.name}: {exc}", path) from exc
    if sol.optimal:
        problems = audit_solution(model, sol.values)
        if problems:
            path = write_lp(model, opts.diagnostics_dir)
            raise MilpError(f"{model.name}: solution fails feasibility audit: {problems[:3]}", path)
    return sol


def solve_lp_file(path: str, model: MilpModel, options: SolveOptions | None = None) -> MilpSolution:
    """Import an LP file into the HiGHS backend and solve it (round-trip check)."""
    return _solve_highs(model, options or SolveOptions(), None, lp_path=path)
