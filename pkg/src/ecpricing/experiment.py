"""Experiment runner: the daily Thompson-sampling pricing loop, result files and replay.

One experiment is a set of independent runs over the same community and
exogenous days.  Each run keeps a Gaussian belief per prosumer and, every
day, samples weights, solves the price-setting MILP, posts the prices,
observes the noisy responses and updates the beliefs.  The clairvoyant
baseline (the same MILP solved with the hidden weights) is computed once per
day and shared by all runs.

Hidden weights are read only through the environment (responses) and the
metric baselines (clairvoyant cost, realised cost, posterior error).
"""

from __future__ import annotations

import datetime as dt
import hashlib
import importlib.metadata
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import milp
from .bilevel import (
    BigMPolicy,
    BipsAuditError,
    BipsInfeasibleError,
    BipsSolution,
    CommunityEconomics,
    KktStructureError,
    assemble_bips,
    outside_cost,
    solve_bips,
)
from .config import ConfigError, ExperimentConfig, config_from_dict, config_hash, config_to_dict
from .data import DataError, ExogenousDay, load_exogenous, synth_exogenous
from .environment import (
    OwnershipModel,
    TrueCommunity,
    day_blocks,
    default_catalogue,
    flip_weights,
    make_community,
    profile_matrix,
    save_community,
)
from .learner import PriorConfig, ShiftDetector, SingularUpdateError, init_prior, sample_weights, update_posterior
from .metrics import realized_cost, violation_series, write_table
from .milp import MilpError, SolveOptions
from .signatures import CachedLp, SignatureSolveError, TimeGrid

logger = logging.getLogger(__name__)

__all__ = [
    "ExperimentError",
    "ReplayError",
    "Setup",
    "DayRecord",
    "RunOutcome",
    "ReplayResult",
    "prepare",
    "economics_for",
    "clairvoyant_day",
    "run_learning",
    "run_experiment",
    "replay",
    "load_manifest",
    "SOLVER_ERRORS",
    "RESULT_FILES",
]

MANIFEST = "manifest.json"
FORMAT_VERSION = 1
# per-run files covered by the determinism contract (timing.csv is not)
RESULT_FILES = ("regret.csv", "violation.csv", "beliefs.csv", "errors.csv", "prices.csv", "diagnostics.csv")

SOLVER_ERRORS = (MilpError, BipsInfeasibleError, BipsAuditError, SignatureSolveError, SingularUpdateError,
                 KktStructureError)


class ExperimentError(RuntimeError):
    """A run or the clairvoyant baseline aborted."""


class ReplayError(RuntimeError):
    """The manifest cannot be replayed (tampered, or produced by another backend/version)."""


# --------------------------------------------------------------------------- setup


@dataclass
class Setup:
    """Everything shared by the runs of one experiment."""

    config: ExperimentConfig
    days: list[ExogenousDay]
    community: TrueCommunity  # before the event
    shifted: TrueCommunity | None = None  # after the event
    flipped: list[int] = field(default_factory=list)
    _blocks: dict = field(default_factory=dict, repr=False)
    _baseload_cache: dict = field(default_factory=dict, repr=False)

    @property
    def catalogue(self):
        return self.community.catalogue

    def community_on(self, day: int) -> TrueCommunity:
        """Community in force on 1-based ``day``."""
        event = self.config.event.day
        if self.shifted is not None and event is not None and day >= event:
            return self.shifted
        return self.community

    def blocks(self, day: int):
        if day not in self._blocks:
            self._blocks.clear()  # one day at a time keeps memory flat
            self._blocks[day] = day_blocks(self.catalogue, self.community.baseload, self.days[day - 1],
                                           self._baseload_cache)
        return self._blocks[day]


def _catalogue(cfg: ExperimentConfig):
    cat = default_catalogue(TimeGrid(cfg.horizon, cfg.period_duration))
    if cfg.signatures is not None:
        try:
            cat = cat.subset(cfg.signatures)
        except KeyError as exc:
            raise ConfigError(f"signatures: {exc.args[0]}") from None
    return cat


def load_days(cfg: ExperimentConfig) -> list[ExogenousDay]:
    d = cfg.data
    if d.source == "synthetic":
        start = dt.date.fromisoformat(d.start)
        return synth_exogenous(cfg.days, cfg.data_seed, cfg.prosumers, cfg.horizon, start)
    days = load_exogenous(d.prices, d.temperature, d.pv, d.baseload, cfg.horizon)
    if len(days) < cfg.days:
        raise DataError(f"data files cover {len(days)} days, config asks for {cfg.days}")
    if days[0].n_prosumers != cfg.prosumers:
        raise DataError(f"baseload file has {days[0].n_prosumers} prosumers, config asks for {cfg.prosumers}")
    return days[:cfg.days]


def prepare(cfg: ExperimentConfig) -> Setup:
    days = load_days(cfg)
    o = cfg.ownership
    community = make_community(cfg.prosumers, cfg.community_seed, _catalogue(cfg), days[0].baseload,
                               OwnershipModel(o.battery, o.heatpump, o.ev, o.pv_none, o.pv_min, o.pv_max),
                               cfg.noise_fraction)
    setup = Setup(cfg, days, community)
    if cfg.event.day is not None and cfg.event.fraction > 0:
        setup.shifted, setup.flipped = flip_weights(community, cfg.event.fraction, cfg.event.seed)
    return setup


def solve_options(cfg: ExperimentConfig, diagnostics_dir: Path | None) -> SolveOptions:
    s = cfg.solver
    return SolveOptions(backend=s.backend, time_limit=s.time_limit, mip_rel_gap=s.mip_rel_gap,
                        mip_abs_gap=s.mip_abs_gap, seed=s.seed, threads=s.threads, solver_path=s.solver_path,
                        diagnostics_dir=str(diagnostics_dir) if diagnostics_dir else None)


def economics_for(cfg: ExperimentConfig, day: ExogenousDay, blocks, weights, lp) -> CommunityEconomics:
    """Day economics; the stand-alone (outside) cost uses the given weights."""
    e = cfg.economics
    outside_retail = day.spot_price + e.outside_import_tariff
    export = day.spot_price - e.export_tariff
    oc = outside_cost(blocks, weights, outside_retail, export, lp)
    return CommunityEconomics(day.spot_price, e.import_tariff, e.export_tariff, e.violation_penalty,
                              cfg.capacity(), oc, e.price_cap, e.exchange_limit,
                              e.revenue_deficit_penalty)


def _policy(cfg: ExperimentConfig) -> BigMPolicy:
    s = cfg.solver
    return BigMPolicy(dual=s.bigm_dual, primal_default=s.bigm_primal_default, max_doublings=s.max_doublings)


def _recommended(sol: BipsSolution, n: int):
    return sol.signature_states[n]


def respond(blocks, sol: BipsSolution, weights, lp) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-prosumer profile matrices at the posted prices and the noise-free responses under ``weights``."""
    P = [profile_matrix(blocks[n], sol.prices[n], _recommended(sol, n), lp) for n in range(len(blocks))]
    y = np.array([P[n] @ np.asarray(weights[n], dtype=float) for n in range(len(blocks))])
    return P, y


# --------------------------------------------------------------------------- clairvoyant


@dataclass
class ClairvoyantDay:
    day: int
    cost: float  # realised cost of the clairvoyant prices under the true weights
    model_cost: float  # the MILP objective
    violation: np.ndarray
    bigm_max_ratio: float
    payment_gap: float
    revenue_deficit: float = 0.0
    method: str = ""


def clairvoyant_day(setup: Setup, day: int, options: SolveOptions, lp=None) -> ClairvoyantDay:
    """BiPS solved with the true weights of the community in force on ``day``."""
    cfg = setup.config
    lp = lp or CachedLp()
    truth = setup.community_on(day).true_weights
    blocks = setup.blocks(day)
    econ = economics_for(cfg, setup.days[day - 1], blocks, truth, lp)
    bips = assemble_bips(truth, blocks, econ, _policy(cfg), name=f"clairvoyant_d{day}")
    sol = solve_bips(bips, options, lp)
    _, y = respond(blocks, sol, truth, lp)
    return ClairvoyantDay(day, realized_cost(y, econ), sol.community_cost,
                          violation_series(y, econ.capacity_limit), sol.bigm_max_ratio,
                          float(np.max(np.abs(sol.payments - sol.payments_primal))), sol.revenue_deficit, sol.method)


def clairvoyant_series(setup: Setup, options: SolveOptions) -> list[ClairvoyantDay]:
    out = []
    lp = CachedLp()
    for d in range(1, setup.config.days + 1):
        lp.clear()
        try:
            out.append(clairvoyant_day(setup, d, options, lp))
        except SOLVER_ERRORS as exc:
            raise ExperimentError(f"clairvoyant baseline failed on day {d}: {exc}") from exc
    return out


# --------------------------------------------------------------------------- learning run


@dataclass
class DayRecord:
    day: int
    date: str
    sampled_cost: float
    anticipated_cost: float
    clairvoyant_cost: float
    regret: float
    violation: np.ndarray
    clairvoyant_violation: np.ndarray
    prices: np.ndarray  # (N, T)
    means: np.ndarray  # (N, K) after the update
    variances: np.ndarray  # (N, K)
    abs_error: np.ndarray  # (N, K)
    resamples: int
    resets: list[int]
    bigm_doublings: int
    bigm_max_ratio: float
    complementarity_residual: float
    lower_level_gap: float
    payment_gap: float
    method: str
    n_binaries: int
    seconds: float
    mip_gap: float = 0.0
    revenue_deficit: float = 0.0


@dataclass
class RunOutcome:
    run: int
    records: list[DayRecord]
    status: str = "ok"
    error: str | None = None
    failed_day: int | None = None
    diagnostics: str | None = None


def _rng(cfg: ExperimentConfig, run: int, day: int, n: int, purpose: int, attempt: int = 0):
    return np.random.default_rng([cfg.learner_seed, run, day, n, purpose, attempt])


PURPOSE_SAMPLE, PURPOSE_NOISE = 0, 1


def run_learning(setup: Setup, run: int, clairvoyant: list[ClairvoyantDay], options: SolveOptions,
                 on_day=None) -> RunOutcome:
    """One Thompson-sampling run; solver failures stop the run and are reported in the outcome."""
    cfg = setup.config
    cat = setup.catalogue
    N, K = cfg.prosumers, cat.size
    prior_cfg = PriorConfig(cfg.prior.mean, cfg.prior.std, cfg.prior.pv_scale, tuple(cat.indices("pv")))
    beliefs = [init_prior(K, prior_cfg) for _ in range(N)]
    detectors = [ShiftDetector(cfg.shift.tolerance, cfg.shift.window) for _ in range(N)]
    records: list[DayRecord] = []
    lp = CachedLp()
    policy = _policy(cfg)
    day = 0
    try:
        for day in range(1, cfg.days + 1):
            t0 = time.perf_counter()
            lp.clear()
            exo = setup.days[day - 1]
            blocks = setup.blocks(day)
            community = setup.community_on(day)

            # 1-3: sample, assemble and solve; resample if the sampled problem is infeasible
            for attempt in range(cfg.solver.max_resamples + 1):
                W = np.array([sample_weights(beliefs[n], _rng(cfg, run, day, n, PURPOSE_SAMPLE, attempt))
                              for n in range(N)])
                if cfg.prior.clip_negative:
                    W = np.maximum(W, 0.0)
                econ = economics_for(cfg, exo, blocks, W, lp)
                bips = assemble_bips(W, blocks, econ, policy, name=f"run{run}_d{day}")
                try:
                    sol = solve_bips(bips, options, lp, branch=cfg.solver.branch_and_bound)
                    break
                except BipsInfeasibleError:
                    if attempt == cfg.solver.max_resamples:
                        raise
                    logger.info("run %d day %d: sampled problem infeasible, resampling", run, day)

            # 4: post prices and observe responses
            P, y_true = respond(blocks, sol, community.true_weights, lp)
            observed = [y_true[n] + _rng(cfg, run, day, n, PURPOSE_NOISE).normal(
                0.0, community.noise[n].response_noise_std, len(y_true[n])) for n in range(N)]

            # 5: shift detection, optional reset, posterior update
            resets = []
            for n in range(N):
                noise = setup.community.noise[n]
                if cfg.shift.enabled and detectors[n].observe(P[n] @ beliefs[n].mean, observed[n]):
                    beliefs[n] = init_prior(K, prior_cfg)
                    resets.append(n)
                beliefs[n] = update_posterior(beliefs[n], P[n], observed[n], noise)

            # 6: metrics against the clairvoyant baseline
            cv = clairvoyant[day - 1]
            cost = realized_cost(y_true, econ)
            means = np.array([b.mean for b in beliefs])
            rec = DayRecord(
                day=day, date=exo.date.isoformat(), sampled_cost=cost, anticipated_cost=sol.community_cost,
                clairvoyant_cost=cv.cost, regret=cost - cv.cost,
                violation=violation_series(y_true, econ.capacity_limit), clairvoyant_violation=cv.violation,
                prices=sol.prices, means=means, variances=np.array([np.diag(b.covariance) for b in beliefs]),
                abs_error=np.abs(means - community.true_weights), resamples=attempt, resets=resets,
                bigm_doublings=sol.bigm_doublings, bigm_max_ratio=sol.bigm_max_ratio,
                complementarity_residual=sol.complementarity_residual, lower_level_gap=sol.lower_level_gap,
                payment_gap=float(np.max(np.abs(sol.payments - sol.payments_primal))), method=sol.method,
                n_binaries=sol.n_binaries, seconds=time.perf_counter() - t0, mip_gap=sol.mip_gap,
                revenue_deficit=sol.revenue_deficit,
            )
            records.append(rec)
            if on_day is not None:
                on_day(run, rec)
    except SOLVER_ERRORS as exc:
        logger.error("run %d aborted on day %d: %s", run, day, exc)
        return RunOutcome(run, records, "failed", f"{type(exc).__name__}: {exc}", day,
                          getattr(exc, "export_path", None))
    return RunOutcome(run, records)


# --------------------------------------------------------------------------- result files


def write_run(directory: Path, outcome: RunOutcome, names: list[str]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    recs = outcome.records
    cum = np.cumsum([r.regret for r in recs]) if recs else np.zeros(0)
    write_table(directory / "regret.csv", {
        "day": [r.day for r in recs],
        "date": [r.date for r in recs],
        "sampled_cost": [r.sampled_cost for r in recs],
        "clairvoyant_cost": [r.clairvoyant_cost for r in recs],
        "regret": [r.regret for r in recs],
        "cumulative": [float(c) for c in cum],
        "anticipated_cost": [r.anticipated_cost for r in recs],
    })
    rows = [(r.day, t, float(v), float(c)) for r in recs
            for t, (v, c) in enumerate(zip(r.violation, r.clairvoyant_violation))]
    write_table(directory / "violation.csv", dict(zip(("day", "period", "violation", "clairvoyant_violation"),
                                                      _columns(rows, 4))))
    rows = [(r.day, n, names[k], float(r.means[n, k]), float(r.variances[n, k]))
            for r in recs for n in range(r.means.shape[0]) for k in range(r.means.shape[1])]
    write_table(directory / "beliefs.csv", dict(zip(("day", "prosumer", "signature", "mean", "variance"),
                                                    _columns(rows, 5))))
    rows = [(r.day, n, names[k], float(r.abs_error[n, k]))
            for r in recs for n in range(r.abs_error.shape[0]) for k in range(r.abs_error.shape[1])]
    write_table(directory / "errors.csv", dict(zip(("day", "prosumer", "signature", "abs_error"),
                                                   _columns(rows, 4))))
    rows = [(r.day, n, t, float(r.prices[n, t]))
            for r in recs for n in range(r.prices.shape[0]) for t in range(r.prices.shape[1])]
    write_table(directory / "prices.csv", dict(zip(("day", "prosumer", "period", "price"), _columns(rows, 4))))
    write_table(directory / "diagnostics.csv", {
        "day": [r.day for r in recs],
        "method": [r.method for r in recs],
        "binaries": [r.n_binaries for r in recs],
        "resamples": [r.resamples for r in recs],
        "resets": [" ".join(map(str, r.resets)) for r in recs],
        "bigm_doublings": [r.bigm_doublings for r in recs],
        "bigm_max_ratio": [r.bigm_max_ratio for r in recs],
        "complementarity_residual": [r.complementarity_residual for r in recs],
        "lower_level_gap": [r.lower_level_gap for r in recs],
        "payment_gap": [r.payment_gap for r in recs],
        "mip_gap": [r.mip_gap for r in recs],
        "revenue_deficit": [r.revenue_deficit for r in recs],
    })
    write_table(directory / "timing.csv", {"day": [r.day for r in recs], "seconds": [r.seconds for r in recs]})


def _columns(rows, width):
    return [[row[i] for row in rows] for i in range(width)] if rows else [[] for _ in range(width)]


def write_clairvoyant(path: Path, series: list[ClairvoyantDay]) -> None:
    write_table(path, {
        "day": [c.day for c in series],
        "cost": [c.cost for c in series],
        "model_cost": [c.model_cost for c in series],
        "violation": [float(c.violation.sum()) for c in series],
        "bigm_max_ratio": [c.bigm_max_ratio for c in series],
        "payment_gap": [c.payment_gap for c in series],
        "revenue_deficit": [c.revenue_deficit for c in series],
        "method": [c.method for c in series],
    })


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def backend_info(cfg: ExperimentConfig) -> dict:
    import os

    backend = os.environ.get("ECPRICING_BACKEND", cfg.solver.backend)
    info = {"name": backend}
    try:
        info["highspy"] = importlib.metadata.version("highspy")
    except importlib.metadata.PackageNotFoundError:
        info["highspy"] = None
    info["scipy"] = importlib.metadata.version("scipy")
    if backend == "highs-cli":
        info["solver_path"] = os.environ.get("ECPRICING_SOLVER_PATH", cfg.solver.solver_path)
    return info


def _package_version() -> str:
    try:
        return importlib.metadata.version("artifact")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def _manifest_digest(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_manifest(out: Path, cfg: ExperimentConfig, outcomes: list[RunOutcome], setup: Setup) -> dict:
    files = {}
    for p in sorted(out.glob("run_*/*.csv")):
        if p.name in RESULT_FILES:
            files[str(p.relative_to(out))] = _sha256(p)
    for name in ("clairvoyant.csv", "community.json"):
        if (out / name).exists():
            files[name] = _sha256(out / name)
    doc = {
        "format": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seeds": {"community": cfg.community_seed, "data": cfg.data_seed, "learner": cfg.learner_seed,
                  "solver": cfg.solver.seed, "event": cfg.event.seed},
        "package_version": _package_version(),
        "backend": backend_info(cfg),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "flipped_prosumers": setup.flipped,
        "runs": [{"run": o.run, "status": o.status, "days": len(o.records), "error": o.error,
                  "failed_day": o.failed_day, "diagnostics": o.diagnostics} for o in outcomes],
        "files": files,
    }
    doc["manifest_hash"] = _manifest_digest(doc)
    (out / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc


# --------------------------------------------------------------------------- experiment


def _run_worker(args):
    cfg_dict, run, clair, out = args
    cfg = config_from_dict(cfg_dict)
    setup = prepare(cfg)
    options = solve_options(cfg, Path(out) / "diagnostics")
    outcome = run_learning(setup, run, clair, options)
    write_run(Path(out) / f"run_{run:02d}", outcome, setup.catalogue.names)
    return outcome


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, plots: bool | None = None,
                   progress=None) -> tuple[Path, dict]:
    """Run every configured run and write result files, manifest and (optionally) figures.

    Returns the results directory and the manifest.  Raises
    :class:`ExperimentError` if the clairvoyant baseline fails; individual
    run failures are recorded in the manifest and the other runs continue.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = prepare(cfg)
    options = solve_options(cfg, out / "diagnostics")
    save_community(setup.community, out / "community.json")
    if setup.shifted is not None:
        save_community(setup.shifted, out / "community_after_event.json")

    t0 = time.perf_counter()
    clair = clairvoyant_series(setup, options)
    write_clairvoyant(out / "clairvoyant.csv", clair)
    logger.info("clairvoyant baseline: %.1f s", time.perf_counter() - t0)

    if jobs > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_worker, [(config_to_dict(cfg), r, clair, str(out))
                                                   for r in range(cfg.runs)]))
    else:
        outcomes = []
        for r in range(cfg.runs):
            outcome = run_learning(setup, r, clair, options, progress)
            write_run(out / f"run_{r:02d}", outcome, setup.catalogue.names)
            outcomes.append(outcome)
    manifest = write_manifest(out, cfg, outcomes, setup)
    if cfg.plots if plots is None else plots:
        from .report import render_report

        render_report(out)
    return out, manifest


def failed_runs(manifest: dict) -> list[dict]:
    return [r for r in manifest["runs"] if r["status"] != "ok"]


# --------------------------------------------------------------------------- replay


@dataclass
class ReplayResult:
    directory: Path
    comparable: bool
    identical: bool
    mismatches: list[str]
    reason: str = ""


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReplayError(f"cannot read manifest {path}: {exc}") from None
    if doc.get("format") != FORMAT_VERSION:
        raise ReplayError(f"{path}: unsupported manifest format {doc.get('format')!r}")
    if doc.get("manifest_hash") != _manifest_digest(doc):
        raise ReplayError(f"{path}: manifest hash does not match its contents (tampered?)")
    try:
        cfg = config_from_dict(doc["config"])
    except ConfigError as exc:
        raise ReplayError(f"{path}: stored configuration is invalid: {exc}") from None
    if config_hash(cfg) != doc["config_hash"]:
        raise ReplayError(f"{path}: configuration hash mismatch")
    return doc


def replay(manifest_path, out_dir=None, solver_seed: int | None = None, jobs: int = 1) -> ReplayResult:
    """Re-run a recorded experiment and compare every recorded result file byte for byte."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST
    doc = load_manifest(manifest_path)
    cfg = config_from_dict(doc["config"])
    current = backend_info(cfg)
    if current.get("name") != doc["backend"].get("name") or current.get("highspy") != doc["backend"].get("highspy"):
        raise ReplayError(f"backend/version mismatch: recorded {doc['backend']}, current {current}")
    if doc.get("package_version") != _package_version():
        raise ReplayError(f"package version mismatch: recorded {doc.get('package_version')}, "
                          f"current {_package_version()}")
    comparable, reason = True, ""
    if solver_seed is not None and solver_seed != cfg.solver.seed:
        comparable, reason = False, f"solver seed {solver_seed} differs from recorded seed {cfg.solver.seed}"
        cfg.solver.seed = solver_seed
    out = Path(out_dir) if out_dir is not None else manifest_path.parent / "replay"
    if out.resolve() == manifest_path.parent.resolve():
        raise ReplayError("replay output directory must differ from the recorded results")
    run_experiment(cfg, out, jobs=jobs, plots=False)
    if not comparable:
        return ReplayResult(out, False, False, [], reason)
    mismatches = []
    for rel, digest in sorted(doc["files"].items()):
        p = out / rel
        if not p.exists() or _sha256(p) != digest:
            mismatches.append(rel)
    return ReplayResult(out, True, not mismatches, mismatches)
