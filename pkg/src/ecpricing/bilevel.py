"""Bilevel price setting reduced to a single MILP.

Every signature LP is replaced by its KKT system.  Complementarity between an
inequality dual ``mu`` and its slack is linearised with one binary switch
(big-M), and the bilinear prosumer payment ``sum_t x_t y_t`` is replaced by the
weighted sum of the signature dual objectives, which is linear.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import milp
from .milp import MilpModel, SolveOptions
from .signatures import ConstraintBlock, SignatureSolution, solve_signature_lp

logger = logging.getLogger(__name__)

__all__ = [
    "BigMPolicy",
    "ComplementarityPair",
    "KktBlock",
    "CommunityEconomics",
    "BipsModel",
    "BipsSolution",
    "KktStructureError",
    "UnboundedSlackError",
    "BipsInfeasibleError",
    "BipsAuditError",
    "derive_kkt",
    "bigm_linearize",
    "payment_expression",
    "assemble_bips",
    "solve_bips",
    "outside_cost",
    "standalone_cost",
]

_TIGHT_TOL = 1e-9


class KktStructureError(ValueError):
    pass


class UnboundedSlackError(ValueError):
    pass


class BipsInfeasibleError(RuntimeError):
    def __init__(self, message: str, export_path: str | None = None):
        super().__init__(message if export_path is None else f"{message} (model written to {export_path})")
        self.export_path = export_path


class BipsAuditError(RuntimeError):
    def __init__(self, message: str, export_path: str | None = None):
        super().__init__(message if export_path is None else f"{message} (model written to {export_path})")
        self.export_path = export_path


@dataclass(frozen=True)
class BigMPolicy:
    """Big-M values for the complementarity switches.

    Primal M values come from the variable bounds of the block whenever they
    are finite (and are then exact); otherwise ``primal_default`` is used.  The
    dual M is always heuristic and is audited after the solve.
    """

    dual: float = 1e4
    primal_default: float | None = 1e4
    audit_fraction: float = 0.01
    max_doublings: int = 4

    def doubled(self) -> "BigMPolicy":
        pd = None if self.primal_default is None else 2 * self.primal_default
        return replace(self, dual=2 * self.dual, primal_default=pd)


@dataclass
class ComplementarityPair:
    row: int
    mu: int
    mode: str  # "switch" | "tight" (slack always 0) | "slack" (slack always > 0, mu = 0)
    slack_max: float
    binary: int | None = None
    m_primal: float | None = None
    m_primal_exact: bool = False
    m_dual: float | None = None


@dataclass
class KktBlock:
    block: ConstraintBlock
    primal: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    prices: np.ndarray
    pairs: list[ComplementarityPair]
    stationarity_rows: np.ndarray

    @property
    def link(self) -> np.ndarray:
        return self.primal[self.block.link]

    def slacks(self, values) -> np.ndarray:
        z = np.asarray(values)[self.primal]
        return self.block.h - self.block.G @ z

    def dual_objective(self, values) -> float:
        v = np.asarray(values)
        return self.block.dual_objective(v[self.lam], v[self.mu])

    def dual_terms(self, values) -> dict[str, float]:
        """Dual objective split by dual family (``lambda2``, ``mu_B_hi`` ...)."""
        v = np.asarray(values)
        out: dict[str, float] = {}
        for label, b, lam in zip(self.block.eq_labels, self.block.b_eq, v[self.lam]):
            fam = label.split("[")[0]
            out[fam] = out.get(fam, 0.0) + b * lam
        for label, h, mu in zip(self.block.ineq_labels, self.block.h, v[self.mu]):
            fam = label.split("[")[0]
            out[fam] = out.get(fam, 0.0) - h * mu
        return out


def _variable_ranges(block: ConstraintBlock) -> tuple[np.ndarray, np.ndarray]:
    """Bounds implied by single-variable rows of the block."""
    n = block.n_vars
    lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    G = block.G.tocsr()
    for i in range(G.shape[0]):
        cols = G.indices[G.indptr[i]:G.indptr[i + 1]]
        vals = G.data[G.indptr[i]:G.indptr[i + 1]]
        if len(cols) == 1 and vals[0] != 0:
            bound = block.h[i] / vals[0]
            if vals[0] > 0:
                hi[cols[0]] = min(hi[cols[0]], bound)
            else:
                lo[cols[0]] = max(lo[cols[0]], bound)
    A = block.A_eq.tocsr()
    for i in range(A.shape[0]):
        cols = A.indices[A.indptr[i]:A.indptr[i + 1]]
        vals = A.data[A.indptr[i]:A.indptr[i + 1]]
        if len(cols) == 1 and vals[0] != 0:
            v = block.b_eq[i] / vals[0]
            lo[cols[0]] = hi[cols[0]] = v
    return lo, hi


@dataclass(frozen=True)
class _Structure:
    """Per-block data reused every time the block is embedded in a model."""

    lo: np.ndarray
    hi: np.ndarray
    slack_min: np.ndarray
    slack_max: np.ndarray
    A: sp.coo_matrix
    G: sp.coo_matrix
    stationarity: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]  # rows, cols, vals, column kind
    var_tags: tuple[str, ...]
    eq_tags: tuple[str, ...]
    ineq_tags: tuple[str, ...]


def _row_slack_ranges(G: sp.csr_matrix, h, lo, hi) -> tuple[np.ndarray, np.ndarray]:
    """Interval ``[min, max]`` of each ``h_i - g_i.z`` over the box ``lo <= z <= hi``."""
    m = G.shape[0]
    rows = np.repeat(np.arange(m), np.diff(G.indptr))
    g, c = G.data, G.indices
    with np.errstate(invalid="ignore"):
        up = np.where(g > 0, g * hi[c], g * lo[c])  # finite or +inf
        down = np.where(g > 0, g * lo[c], g * hi[c])  # finite or -inf
    gmax = np.bincount(rows, weights=np.nan_to_num(up, posinf=0.0), minlength=m).astype(float)
    gmin = np.bincount(rows, weights=np.nan_to_num(down, neginf=0.0), minlength=m).astype(float)
    gmax[np.bincount(rows, weights=np.isinf(up), minlength=m) > 0] = np.inf
    gmin[np.bincount(rows, weights=np.isinf(down), minlength=m) > 0] = -np.inf
    return h - gmax, h - gmin


_STRUCTURES: dict[int, tuple[ConstraintBlock, _Structure]] = {}


def _structure(block: ConstraintBlock) -> _Structure:
    hit = _STRUCTURES.get(id(block))
    if hit is not None and hit[0] is block:
        return hit[1]
    lo, hi = _variable_ranges(block)
    smin, smax = _row_slack_ranges(block.G.tocsr(), block.h, lo, hi)
    n, T = block.n_vars, block.horizon
    AT = sp.coo_matrix(-block.A_eq.T)
    GT = sp.coo_matrix(block.G.T)
    rows = np.concatenate([np.asarray(block.link), AT.row, GT.row])
    cols = np.concatenate([np.arange(T), AT.col, GT.col])
    vals = np.concatenate([np.ones(T), AT.data, GT.data])
    kind = np.concatenate([np.zeros(T, int), np.ones(len(AT.data), int), np.full(len(GT.data), 2)])
    st = _Structure(
        lo, hi, smin, smax, sp.coo_matrix(block.A_eq), sp.coo_matrix(block.G), (rows, cols, vals, kind),
        tuple(_safe(v) for v in block.var_names), tuple(_safe(v) for v in block.eq_labels),
        tuple(_safe(v) for v in block.ineq_labels),
    )
    if len(_STRUCTURES) > 20000:
        _STRUCTURES.clear()
    _STRUCTURES[id(block)] = (block, st)
    return st


def derive_kkt(
    model: MilpModel,
    block: ConstraintBlock,
    price_vars,
    dual_bound: float = 1e4,
    prefix: str | None = None,
) -> KktBlock:
    """Add primal feasibility, stationarity and dual sign conditions of ``block``.

    ``price_vars`` are model indices of the prices multiplying the block's
    link variable in its objective.  Complementarity is left to
    :func:`bigm_linearize`.
    """
    for label in block.eq_labels:
        if not label.startswith("lambda"):
            raise KktStructureError(f"{block.name}: equality row labelled {label!r}, expected a lambda dual")
    for label in block.ineq_labels:
        if not label.startswith("mu"):
            raise KktStructureError(f"{block.name}: inequality row labelled {label!r}, expected a mu dual")
    price_vars = np.asarray(price_vars, dtype=int)
    if price_vars.shape != (block.horizon,):
        raise KktStructureError(f"{block.name}: need one price variable per period")
    st = _structure(block)
    tag = _safe(prefix or block.name)
    z = model.add_vars([f"{tag}_{v}" for v in st.var_tags], st.lo, st.hi)
    lam = model.add_vars([f"{tag}_{l}" for l in st.eq_tags], -dual_bound, dual_bound)
    mu = model.add_vars([f"{tag}_{l}" for l in st.ineq_tags], 0.0, dual_bound)
    if len(block.b_eq):
        model.add_triplets(st.A.row, z[st.A.col], st.A.data, "=", block.b_eq,
                           [f"{tag}_pf_{l}" for l in st.eq_tags])
    if len(block.h):
        model.add_triplets(st.G.row, z[st.G.col], st.G.data, "<=", block.h,
                           [f"{tag}_pf_{l}" for l in st.ineq_tags])
    # c(x) - A^T lam + G^T mu = 0, one row per primal variable
    rows, cols, vals, kind = st.stationarity
    target = np.empty(len(cols), dtype=int)
    for code, handles in enumerate((price_vars, lam, mu)):
        sel = kind == code
        target[sel] = handles[cols[sel]]
    st_rows = model.add_triplets(rows, target, vals, "=", np.zeros(block.n_vars),
                                 [f"{tag}_st_{v}" for v in st.var_tags])
    pairs = []
    for i in range(len(block.h)):
        smin, smax = float(st.slack_min[i]), float(st.slack_max[i])
        if smax <= _TIGHT_TOL:
            mode = "tight"
        elif smin > _TIGHT_TOL:
            mode = "slack"
        else:
            mode = "switch"
        pairs.append(ComplementarityPair(row=i, mu=int(mu[i]), mode=mode, slack_max=smax))
    return KktBlock(block, z, lam, mu, price_vars, pairs, st_rows)


def bigm_linearize(model: MilpModel, kkt: KktBlock, policy: BigMPolicy = BigMPolicy()) -> int:
    """Fortuny-Amat linearisation of every complementarity pair; returns the binary count.

    A switch ``z`` per pair gives ``mu <= M_d z`` and ``slack <= M_p (1 - z)``.
    Pairs whose slack is constant need no switch: a positive constant slack
    forces ``mu = 0`` and a zero slack leaves ``mu`` free.
    """
    block = kkt.block
    G = block.G.tocsr()
    tag = _safe(block.name)
    switched = []
    for pair in kkt.pairs:
        pair.m_dual = policy.dual
        model.set_bounds(pair.mu, ub=0.0 if pair.mode == "slack" else policy.dual)
        if pair.mode != "switch":
            continue
        if math.isfinite(pair.slack_max):
            pair.m_primal, pair.m_primal_exact = pair.slack_max, True
        elif policy.primal_default is not None:
            pair.m_primal, pair.m_primal_exact = policy.primal_default, False
        else:
            raise UnboundedSlackError(
                f"{block.name}: no finite big-M for row {block.ineq_labels[pair.row]} and no default given"
            )
        switched.append(pair)
    if not switched:
        return 0
    labels = [_safe(block.ineq_labels[p.row]) for p in switched]
    u = model.add_vars([f"{tag}_z_{l}" for l in labels], 0.0, 1.0, binary=True)
    m = len(switched)
    mu = np.array([p.mu for p in switched])
    # mu - M_d z <= 0
    model.add_triplets(np.r_[np.arange(m), np.arange(m)], np.r_[mu, u],
                       np.r_[np.ones(m), np.full(m, -policy.dual)], "<=", np.zeros(m),
                       [f"{tag}_cd_{l}" for l in labels])
    # h - G z <= M_p (1 - u)   <=>   -G z + M_p u <= M_p - h
    rows, cols, vals = [], [], []
    mp = np.array([p.m_primal for p in switched])
    for i, p in enumerate(switched):
        sl = slice(G.indptr[p.row], G.indptr[p.row + 1])
        rows.append(np.full(sl.stop - sl.start, i))
        cols.append(kkt.primal[G.indices[sl]])
        vals.append(-G.data[sl])
    rows.append(np.arange(m))
    cols.append(u)
    vals.append(mp)
    model.add_triplets(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), "<=",
                       mp - block.h[[p.row for p in switched]], [f"{tag}_cp_{l}" for l in labels])
    for p, j in zip(switched, u):
        p.binary = int(j)
    return m


def payment_expression(kkts: Sequence[KktBlock | None], weights) -> dict[int, float]:
    """Linear payment of one prosumer: ``sum_k w_k (b_k . lam_k - h_k . mu_k)``.

    Equals ``sum_t x_t y_t`` whenever every signature is at its optimum.
    """
    weights = np.asarray(weights, dtype=float)
    if len(kkts) != len(weights):
        raise KktStructureError("one KKT block (or None) per weight required")
    expr: dict[int, float] = {}
    for kkt, w in zip(kkts, weights):
        if w == 0:
            continue
        if kkt is None:
            raise KktStructureError("missing duals for a signature with nonzero weight")
        for j, b in zip(kkt.lam, kkt.block.b_eq):
            if b:
                expr[int(j)] = expr.get(int(j), 0.0) + w * b
        for j, h in zip(kkt.mu, kkt.block.h):
            if h:
                expr[int(j)] = expr.get(int(j), 0.0) - w * h
    return expr


@dataclass
class CommunityEconomics:
    """Per-day economics of the community at its grid connection point."""

    spot_price: np.ndarray
    import_tariff: np.ndarray
    export_tariff: np.ndarray
    violation_penalty: np.ndarray
    capacity_limit: np.ndarray
    outside_cost: np.ndarray
    price_cap: float = 10.0
    exchange_limit: float | None = None
    deficit_penalty: float | None = None  # None: revenue adequacy is a hard constraint

    def __post_init__(self):
        T = len(np.atleast_1d(self.spot_price))
        for name in ("spot_price", "import_tariff", "export_tariff", "violation_penalty", "capacity_limit"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (T,)).copy()
            setattr(self, name, arr)
        self.outside_cost = np.asarray(self.outside_cost, dtype=float)
        if np.any(self.spot_price < 0):
            raise ValueError("spot prices must be clipped at zero")
        if not np.all(self.violation_penalty > np.max(self.retail_price)):
            raise ValueError("violation penalty must exceed the highest retail price")
        if not self.price_cap > 0:
            raise ValueError("price_cap must be positive")
        if self.deficit_penalty is not None and not self.deficit_penalty > 1:
            raise ValueError("deficit_penalty must exceed 1 (or be None for a hard constraint)")

    @property
    def horizon(self) -> int:
        return len(self.spot_price)

    @property
    def retail_price(self) -> np.ndarray:
        return self.spot_price + self.import_tariff

    @property
    def export_price(self) -> np.ndarray:
        return self.spot_price - self.export_tariff

    @property
    def exchange_bound(self) -> float:
        if self.exchange_limit is not None:
            return float(self.exchange_limit)
        finite = self.capacity_limit[np.isfinite(self.capacity_limit)]
        return 10.0 * float(finite.max()) if finite.size else 1e4

    def community_cost(self, imports, exports, excess) -> float:
        return float(np.sum(imports * self.retail_price - exports * self.export_price
                            + self.violation_penalty * excess))

    def scaled(self, c: float) -> "CommunityEconomics":
        return replace(
            self,
            spot_price=c * self.spot_price,
            import_tariff=c * self.import_tariff,
            export_tariff=c * self.export_tariff,
            violation_penalty=c * self.violation_penalty,
            outside_cost=c * self.outside_cost,
            price_cap=c * self.price_cap,
        )  # deficit_penalty is a ratio and does not scale


def standalone_cost(response, retail, export_price) -> float:
    """Cost of a net profile billed at retail for imports and ``export_price`` for exports."""
    y = np.asarray(response, dtype=float)
    return float(np.sum(retail * np.maximum(y, 0) - export_price * np.maximum(-y, 0)))


def outside_cost(blocks, weights, retail, export_price, lp: Callable | None = None) -> np.ndarray:
    """Stand-alone daily cost of each prosumer under retail prices.

    Each signature is optimised against ``retail``; the weighted profile is
    then billed as a prosumer outside the community would be.
    """
    lp = lp or solve_signature_lp
    weights = np.asarray(weights, dtype=float)
    out = np.zeros(len(blocks))
    for n, row in enumerate(blocks):
        y = np.zeros(len(retail))
        for k, block in enumerate(row):
            if weights[n, k] != 0:
                y += weights[n, k] * lp(block, retail).profile
        out[n] = standalone_cost(y, retail, export_price)
    return out


@dataclass
class BipsModel:
    model: MilpModel
    weights: np.ndarray
    blocks: list
    econ: CommunityEconomics
    policy: BigMPolicy
    prices: np.ndarray  # (N, T) model indices
    response: np.ndarray  # (N, T)
    imports: np.ndarray
    exports: np.ndarray
    excess: np.ndarray
    kkts: list  # [n][k] -> KktBlock | None
    payment_rows: dict = field(default_factory=dict)
    n_binaries: int = 0
    deficit: int | None = None  # revenue-shortfall variable when adequacy is soft

    @property
    def shape(self) -> tuple[int, int, int]:
        n, k = self.weights.shape
        return n, k, self.econ.horizon


def _safe(s: str) -> str:
    return s.replace("[", "_").replace("]", "").replace("/", "_").replace(" ", "_")


def assemble_bips(
    sampled_weights,
    blocks: Sequence[Sequence[ConstraintBlock]],
    econ: CommunityEconomics,
    policy: BigMPolicy = BigMPolicy(),
    name: str = "bips",
) -> BipsModel:
    """Single-level price-setting MILP for fixed signature weights.

    Signatures with a weight of exactly zero cannot affect responses or
    payments and are left out of the model.
    """
    W = np.asarray(sampled_weights, dtype=float)
    if W.ndim != 2 or W.shape[0] != len(blocks) or any(len(r) != W.shape[1] for r in blocks):
        raise ValueError("weights must be an (N, K) matrix matching the block grid")
    if not np.all(np.isfinite(W)):
        raise ValueError("weights must be finite")
    N, K = W.shape
    T = econ.horizon
    if len(econ.outside_cost) != N:
        raise ValueError("one outside cost per prosumer required")
    m = MilpModel(name)
    bound = econ.exchange_bound
    x = np.stack([m.add_vars([f"x_{n}_{t}" for t in range(T)], 0.0, econ.price_cap) for n in range(N)])
    y = np.stack([m.add_vars([f"y_{n}_{t}" for t in range(T)], -math.inf, math.inf) for n in range(N)])
    imp = m.add_vars([f"pim_{t}" for t in range(T)], 0.0, bound)
    exp = m.add_vars([f"pex_{t}" for t in range(T)], 0.0, bound)
    limit = econ.capacity_limit
    pen_ub = np.where(np.isfinite(limit), bound, 0.0)
    pen = m.add_vars([f"ppen_{t}" for t in range(T)], 0.0, pen_ub)

    kkts: list[list[KktBlock | None]] = []
    n_bin = 0
    for n in range(N):
        row = []
        for k in range(K):
            if W[n, k] == 0:
                row.append(None)
                continue
            blk = blocks[n][k]
            if blk.horizon != T:
                raise ValueError(f"{blk.name}: horizon {blk.horizon} != {T}")
            kkt = derive_kkt(m, blk, x[n], policy.dual, prefix=f"n{n}k{k}")
            n_bin += bigm_linearize(m, kkt, policy)
            row.append(kkt)
        kkts.append(row)

    # community cost
    m.add_objective(indices=imp, values=econ.retail_price)
    m.add_objective(indices=exp, values=-econ.export_price)
    m.add_objective(indices=pen, values=econ.violation_penalty)

    for t in range(T):
        coefs = {int(imp[t]): 1.0, int(exp[t]): -1.0}
        for n in range(N):
            coefs[int(y[n, t])] = -1.0
        m.add_row(coefs, "=", 0.0, f"balance_{t}")
        if np.isfinite(limit[t]):
            m.add_row({int(pen[t]): 1.0, int(imp[t]): -1.0}, ">=", -float(limit[t]), f"excess_{t}")
    for n in range(N):
        for t in range(T):
            coefs = {int(y[n, t]): 1.0}
            for k in range(K):
                if kkts[n][k] is not None:
                    j = int(kkts[n][k].link[t])
                    coefs[j] = coefs.get(j, 0.0) - W[n, k]
            m.add_row(coefs, "=", 0.0, f"response_{n}_{t}")

    payment_rows = {}
    total: dict[int, float] = {}
    for n in range(N):
        expr = payment_expression(kkts[n], W[n])
        payment_rows[n] = m.add_row(expr or {int(x[n, 0]): 0.0}, "<=", float(econ.outside_cost[n]), f"ir_{n}")
        for j, v in expr.items():
            total[j] = total.get(j, 0.0) + v
    for j, v in zip(imp, econ.retail_price):
        total[int(j)] = total.get(int(j), 0.0) - v
    for j, v in zip(exp, econ.export_price):
        total[int(j)] = total.get(int(j), 0.0) + v
    for j, v in zip(pen, econ.violation_penalty):
        total[int(j)] = total.get(int(j), 0.0) - v
    deficit = None
    if econ.deficit_penalty is not None:
        # payments + deficit >= cost, the shortfall priced at deficit_penalty per DKK
        deficit = m.add_var("ra_deficit", 0.0, math.inf)
        total[deficit] = 1.0
        m.add_objective({deficit: float(econ.deficit_penalty)})
    m.add_row(total, ">=", 0.0, "ra")
    m.seal()
    return BipsModel(m, W, [list(r) for r in blocks], econ, policy, x, y, imp, exp, pen, kkts, payment_rows, n_bin,
                     deficit)


@dataclass
class BipsSolution:
    prices: np.ndarray
    imports: np.ndarray
    exports: np.ndarray
    excess: np.ndarray
    expected_response: np.ndarray
    community_cost: float
    signature_profiles: np.ndarray  # (N, K, T), zeros where the weight was zero
    signature_states: list  # [n][k] full block variable vector, None where the weight was zero
    payments: np.ndarray  # dual-objective payments
    payments_primal: np.ndarray  # sum_t x_t y_t
    weights: np.ndarray
    n_binaries: int
    bigm_doublings: int
    bigm_max_ratio: float
    complementarity_residual: float
    lower_level_gap: float
    mip_gap: float
    method: str = "branch-and-bound"
    revenue_deficit: float = 0.0
    values: np.ndarray = field(repr=False, default=None)
    bips: BipsModel | None = field(repr=False, default=None)


def _bigm_audit(bips: BipsModel, values: np.ndarray) -> tuple[float, list[str]]:
    """Largest value/M ratio over heuristic bounds, and the variables that are near their bound.

    Every dual is bounded by the dual big-M (equality duals in absolute
    value), so all of them are audited; slacks only where their big-M is not
    an exact range.
    """
    worst, flagged = 0.0, []
    frac = 1.0 - bips.policy.audit_fraction
    names = bips.model.var_names
    for row in bips.kkts:
        for kkt in row:
            if kkt is None:
                continue
            slacks = kkt.slacks(values)
            for pair in kkt.pairs:
                if pair.mode == "slack":
                    continue
                r = values[pair.mu] / pair.m_dual
                if pair.mode == "switch" and not pair.m_primal_exact:
                    r = max(r, slacks[pair.row] / pair.m_primal)
                worst = max(worst, r)
                if r >= frac:
                    flagged.append(names[pair.mu])
            for j in kkt.lam:
                r = abs(values[j]) / bips.policy.dual
                worst = max(worst, r)
                if r >= frac:
                    flagged.append(names[j])
    return worst, flagged


def _switches_from_slacks(bips: BipsModel, v: np.ndarray, slacks_of) -> np.ndarray:
    v = v.copy()
    for n, row in enumerate(bips.kkts):
        for kkt in row:
            if kkt is None:
                continue
            slacks = slacks_of(n, kkt)
            for pair in kkt.pairs:
                if pair.binary is not None:
                    v[pair.binary] = 1.0 if slacks[pair.row] <= 1e-7 * max(1.0, pair.m_primal) else 0.0
    return v


def _warm_start(bips: BipsModel, options: SolveOptions, lp: Callable | None = None, polish_rounds: int = 3
                ) -> tuple[np.ndarray | None, float | None]:
    """Best MILP-feasible point among a few cheap switch patterns, plus the relaxation bound.

    Candidate switch patterns come from (a) the zero slacks of the continuous
    relaxation, and (b) the active sets of the lower-level LPs solved directly
    at the relaxation's prices and at the retail price.  For each pattern the
    binaries are fixed and the remaining LP (prices, profiles and duals) is
    solved.  Pattern (b) is a true KKT point at the candidate prices, so it is
    feasible whenever those prices satisfy the upper-level constraints.  When
    the best candidate attains the relaxation bound, it is optimal without
    any branching.
    """
    lp = lp or solve_signature_lp
    relax = milp.solve(bips.model.relaxed(), options)
    if relax.status == "infeasible":
        raise BipsInfeasibleError(f"{bips.model.name}: continuous relaxation is infeasible")
    if not relax.optimal:
        return None, None
    v0 = relax.values
    econ = bips.econ
    candidates = [_switches_from_slacks(bips, v0, lambda n, kkt: kkt.slacks(v0))]
    for prices in (v0[bips.prices], np.broadcast_to(np.minimum(econ.retail_price, econ.price_cap), bips.prices.shape)):
        def lower_level(n, kkt, prices=prices):
            z = lp(kkt.block, prices[n]).values
            return kkt.block.h - kkt.block.G @ z
        candidates.append(_switches_from_slacks(bips, v0, lower_level))
    best, best_obj, seen = None, math.inf, set()
    bound = relax.objective_value
    tol = max(options.mip_abs_gap, options.mip_rel_gap * abs(bound))

    def evaluate(cand):
        nonlocal best, best_obj
        key = cand[bips.model.is_binary].tobytes()
        if key in seen:
            return False
        seen.add(key)
        fixed = milp.solve(bips.model.fix_binaries(cand), options)
        if fixed.optimal and fixed.objective_value < best_obj - tol:
            best, best_obj = fixed.values, fixed.objective_value
            return True
        return False

    for cand in candidates:
        evaluate(cand)
        if best is not None and best_obj - bound <= tol:
            return best, bound
    # local search: re-derive the active sets at the incumbent's prices until no improvement
    for _ in range(polish_rounds):
        if best is None:
            break
        prices = best[bips.prices]

        def lower_level(n, kkt, prices=prices):
            z = lp(kkt.block, prices[n]).values
            return kkt.block.h - kkt.block.G @ z
        if not evaluate(_switches_from_slacks(bips, best, lower_level)) or best_obj - bound <= tol:
            break
    return best, bound


def _complementarity_residual(bips: BipsModel, values: np.ndarray) -> float:
    worst = 0.0
    for row in bips.kkts:
        for kkt in row:
            if kkt is not None and len(kkt.mu):
                s = kkt.slacks(values)
                worst = max(worst, float(np.max(np.abs(values[kkt.mu] * s))))
    return worst


def solve_bips(
    bips: BipsModel,
    options: SolveOptions | None = None,
    lp: Callable[[ConstraintBlock, np.ndarray], SignatureSolution] | None = None,
    audit: bool = True,
    warm_start: bool = True,
    branch: bool = True,
) -> BipsSolution:
    """Solve, polish and audit a BiPS model.

    A warm start (see :func:`_warm_start`) that attains the relaxation bound
    is returned without branching.  Otherwise, with ``branch=True`` the MILP
    is solved from that start; with ``branch=False`` the best KKT-feasible
    warm start is returned as is (method ``"heuristic"``, ``mip_gap`` is its
    relative distance to the bound), which keeps the run deterministic.
    After a MILP solve the binaries are fixed and the remaining LP is
    re-solved, which removes the integrality-tolerance leakage of big-M rows.
    Dual values near a heuristic big-M trigger a re-assembly with doubled
    M values.  Every signature is then re-solved directly at the returned
    prices and must reproduce the model's lower-level objective.
    """
    options = options or SolveOptions()
    lp = lp or solve_signature_lp
    doublings = 0
    while True:
        start, bound = _warm_start(bips, options, lp) if warm_start else (None, None)
        tol = None if bound is None else max(options.mip_abs_gap, options.mip_rel_gap * abs(bound))
        if start is not None and bips.model.objective_value(start) - bound <= tol:
            # the incumbent attains the relaxation bound: optimal without branching
            values = start
            gap = (bips.model.objective_value(start) - bound) / max(1.0, abs(bound))
            method = "relaxation-bound"
        elif not branch and start is not None:
            # heuristic mode: keep the best KKT-feasible incumbent, report its gap to the bound
            values = start
            gap = (bips.model.objective_value(start) - bound) / max(1.0, abs(bound))
            method = "heuristic"
        else:
            sol = milp.solve(bips.model, options, start=start)
            if sol.status == "infeasible":
                path = milp.write_lp(bips.model, options.diagnostics_dir) if options.diagnostics_dir else None
                raise BipsInfeasibleError(f"{bips.model.name}: price-setting problem is infeasible", path)
            if not sol.optimal:
                path = milp.write_lp(bips.model, options.diagnostics_dir)
                raise BipsAuditError(f"{bips.model.name}: MILP status {sol.status} ({sol.message})", path)
            fixed = milp.solve(bips.model.fix_binaries(sol.values), options)
            values = fixed.values if fixed.optimal else sol.values
            gap, method = sol.gap, "branch-and-bound"
        worst, flagged = _bigm_audit(bips, values)
        if not flagged:
            break
        if doublings >= bips.policy.max_doublings:
            path = milp.write_lp(bips.model, options.diagnostics_dir)
            raise BipsAuditError(f"{bips.model.name}: {len(flagged)} big-M values still binding after "
                                 f"{doublings} doublings", path)
        logger.info("%s: %d values near big-M (ratio %.3f), doubling", bips.model.name, len(flagged), worst)
        bips = assemble_bips(bips.weights, bips.blocks, bips.econ, bips.policy.doubled(), bips.model.name)
        doublings += 1

    N, K, T = bips.shape
    prices = values[bips.prices]
    response = values[bips.response]
    profiles = np.zeros((N, K, T))
    states = [[None] * K for _ in range(N)]
    payments = np.zeros(N)
    for n in range(N):
        for k in range(K):
            kkt = bips.kkts[n][k]
            if kkt is not None:
                profiles[n, k] = values[kkt.link]
                states[n][k] = values[kkt.primal]
        expr = payment_expression(bips.kkts[n], bips.weights[n])
        payments[n] = sum(values[j] * v for j, v in expr.items())
    imports, exports, excess = values[bips.imports], values[bips.exports], values[bips.excess]

    ll_gap = 0.0
    if audit:
        for n in range(N):
            for k in range(K):
                kkt = bips.kkts[n][k]
                if kkt is None:
                    continue
                ref = lp(kkt.block, prices[n]).objective
                model_obj = float(prices[n] @ profiles[n, k])
                rel = abs(ref - model_obj) / max(1.0, abs(ref))
                ll_gap = max(ll_gap, rel)
                if rel > 1e-5:
                    path = milp.write_lp(bips.model, options.diagnostics_dir)
                    raise BipsAuditError(
                        f"{kkt.block.name} (prosumer {n}, signature {k}): model lower-level objective "
                        f"{model_obj:.9g} differs from direct LP optimum {ref:.9g}", path)
    return BipsSolution(
        prices=prices,
        imports=imports,
        exports=exports,
        excess=excess,
        expected_response=response,
        community_cost=bips.econ.community_cost(imports, exports, excess),
        signature_profiles=profiles,
        signature_states=states,
        payments=payments,
        payments_primal=np.sum(prices * response, axis=1),
        weights=bips.weights,
        n_binaries=bips.n_binaries,
        bigm_doublings=doublings,
        bigm_max_ratio=worst,
        complementarity_residual=_complementarity_residual(bips, values),
        lower_level_gap=ll_gap,
        mip_gap=gap,
        method=method,
        revenue_deficit=0.0 if bips.deficit is None else float(values[bips.deficit]),
        values=values,
        bips=bips,
    )
