"""Regret, capacity violation and posterior-error metrics, plus result files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .bilevel import CommunityEconomics
from .learner import WeightBelief

__all__ = [
    "RegretRecord",
    "dispatch",
    "realized_cost",
    "violation_series",
    "posterior_error",
    "regret_records",
    "aggregate_runs",
    "plateau_increase",
    "first_day_below",
    "write_table",
    "read_table",
]

REGRET_TOL = 1e-4


@dataclass(frozen=True)
class RegretRecord:
    day: int
    sampled_cost: float
    clairvoyant_cost: float
    regret: float
    cumulative: float


def dispatch(responses, capacity_limit) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Imports, exports and excess implied by the community's net load."""
    total = np.asarray(responses, dtype=float).reshape(-1, np.shape(responses)[-1]).sum(axis=0)
    imports = np.maximum(total, 0.0)
    exports = np.maximum(-total, 0.0)
    limit = np.broadcast_to(np.asarray(capacity_limit, dtype=float), total.shape)
    with np.errstate(invalid="ignore"):
        excess = np.where(np.isfinite(limit), np.maximum(imports - limit, 0.0), 0.0)
    return imports, exports, excess


def realized_cost(expected_responses, econ: CommunityEconomics) -> float:
    """Community cost of noise-free responses ``(N, T)`` at the connection point."""
    imports, exports, excess = dispatch(expected_responses, econ.capacity_limit)
    return econ.community_cost(imports, exports, excess)


def violation_series(responses, capacity_limit) -> np.ndarray:
    """Energy above the capacity limit in each period."""
    return dispatch(responses, capacity_limit)[2]


def posterior_error(belief: WeightBelief, truth) -> tuple[np.ndarray, float]:
    truth = np.asarray(truth, dtype=float)
    if truth.shape != belief.mean.shape:
        raise ValueError("belief and truth dimensions differ")
    return np.abs(belief.mean - truth), float(np.trace(belief.covariance))


def regret_records(sampled_costs: Sequence[float], clairvoyant_costs: Sequence[float],
                   tol: float = REGRET_TOL) -> list[RegretRecord]:
    """Daily and cumulative regret; raises if any day is below ``-tol``."""
    out, cum = [], 0.0
    for d, (s, c) in enumerate(zip(sampled_costs, clairvoyant_costs), start=1):
        r = float(s) - float(c)
        if r < -tol:
            raise ValueError(f"day {d}: negative regret {r:.3g} (sampled {s:.6f}, clairvoyant {c:.6f})")
        cum += r
        out.append(RegretRecord(d, float(s), float(c), r, cum))
    return out


def aggregate_runs(curves, quantiles=(0.05, 0.95)) -> dict[str, np.ndarray]:
    """Mean and quantile band across runs of ``runs x days`` curves."""
    arr = np.asarray(curves, dtype=float)
    out = {"mean": arr.mean(axis=0)}
    for q in quantiles:
        out[f"q{int(round(q * 100)):02d}"] = np.quantile(arr, q, axis=0)
    return out


def plateau_increase(cumulative, first_day: int, last_day: int) -> float:
    """Growth of a cumulative curve over ``[first_day, last_day]`` (1-based) relative to its final value."""
    cum = np.asarray(cumulative, dtype=float)
    total = cum[last_day - 1]
    if total <= 0:
        return 0.0
    start = cum[first_day - 2] if first_day >= 2 else 0.0
    return float((cum[last_day - 1] - start) / total)


def first_day_below(errors, threshold: float) -> np.ndarray:
    """First day (1-based) each column of a ``days x K`` error table drops below ``threshold``.

    Columns that never do get ``len(errors) + 1``.
    """
    e = np.asarray(errors, dtype=float)
    below = e < threshold
    first = np.where(below.any(axis=0), below.argmax(axis=0) + 1, len(e) + 1)
    return first


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, columns: dict[str, Sequence]) -> Path:
    """Write equal-length columns as CSV with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    length = {len(columns[c]) for c in names}
    if len(length) > 1:
        raise ValueError("columns must have equal length")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(columns[c] for c in names)):
            w.writerow([_fmt(v) for v in row])
    return path


def read_table(path) -> dict[str, list[str]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: [r[i] for r in body] for i, h in enumerate(header)}
