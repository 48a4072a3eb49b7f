"""Read a results directory, summarise it, check the convergence criteria and draw figures."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import aggregate_runs, first_day_below, plateau_increase, read_table, write_table

__all__ = [
    "RunData",
    "Results",
    "load_results",
    "kind_errors",
    "check_results",
    "compare_reset",
    "render_report",
]


@dataclass
class RunData:
    run: int
    regret: np.ndarray  # (days,)
    cumulative: np.ndarray
    violation: np.ndarray  # (days, T)
    clairvoyant_violation: np.ndarray
    errors: np.ndarray  # (days, N, K) absolute posterior error
    means: np.ndarray  # (days, N, K)
    bigm_max_ratio: np.ndarray  # (days,)
    payment_gap: np.ndarray
    complementarity_residual: np.ndarray
    resets: list[list[int]]


@dataclass
class Results:
    directory: Path
    manifest: dict
    signatures: list[str]
    kinds: list[str]
    runs: list[RunData]
    clairvoyant: dict[str, np.ndarray]

    @property
    def days(self) -> int:
        return min(len(r.regret) for r in self.runs) if self.runs else 0


def _floats(col) -> np.ndarray:
    return np.array([float(v) for v in col])


def _cube(table, value: str, days: int, n: int, k: int, names: list[str]) -> np.ndarray:
    out = np.full((days, n, k), np.nan)
    pos = {s: i for i, s in enumerate(names)}
    for d, p, s, v in zip(table["day"], table["prosumer"], table["signature"], table[value]):
        out[int(d) - 1, int(p), pos[s]] = float(v)
    return out


def load_results(directory) -> Results:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    community = json.loads((directory / "community.json").read_text())
    sigs = community["catalogue"]["signatures"]
    names, kinds = [s["name"] for s in sigs], [s["kind"] for s in sigs]
    N = len(community["true_weights"])
    runs = []
    for entry in manifest["runs"]:
        rdir = directory / f"run_{entry['run']:02d}"
        reg = read_table(rdir / "regret.csv")
        days = len(reg["day"])
        viol = read_table(rdir / "violation.csv")
        T = len(viol["day"]) // days if days else 0
        diag = read_table(rdir / "diagnostics.csv")
        runs.append(RunData(
            run=entry["run"],
            regret=_floats(reg["regret"]),
            cumulative=_floats(reg["cumulative"]),
            violation=_floats(viol["violation"]).reshape(days, T),
            clairvoyant_violation=_floats(viol["clairvoyant_violation"]).reshape(days, T),
            errors=_cube(read_table(rdir / "errors.csv"), "abs_error", days, N, len(names), names),
            means=_cube(read_table(rdir / "beliefs.csv"), "mean", days, N, len(names), names),
            bigm_max_ratio=_floats(diag["bigm_max_ratio"]),
            payment_gap=_floats(diag["payment_gap"]),
            complementarity_residual=_floats(diag["complementarity_residual"]),
            resets=[[int(x) for x in r.split()] for r in diag["resets"]],
        ))
    clair = {k: v for k, v in read_table(directory / "clairvoyant.csv").items()}
    clair = {k: (_floats(v) if k != "method" else np.array(v)) for k, v in clair.items()}
    return Results(directory, manifest, names, kinds, runs, clair)


def kind_errors(errors: np.ndarray, kinds: list[str]) -> dict[str, np.ndarray]:
    """Mean absolute error per day over all prosumers and all signatures of each kind."""
    out = {}
    for kind in dict.fromkeys(kinds):
        idx = [k for k, s in enumerate(kinds) if s == kind]
        out[kind] = errors[:, :, idx].mean(axis=(1, 2))
    return out


def check_results(res: Results, plateau_days: int = 25, violation_days: int = 20,
                  regret_tol: float = 1e-4) -> dict[str, dict]:
    """Evaluate the regret, convergence, violation and big-M criteria on a finished experiment.

    Each entry has a boolean ``passed`` and the measured quantities.
    """
    days = res.days
    cum = np.array([r.cumulative[:days] for r in res.runs])
    mean_cum = cum.mean(axis=0)
    first = max(1, days - plateau_days + 1)
    growth = plateau_increase(mean_cum, first, days)
    min_regret = float(min(r.regret.min() for r in res.runs))
    out = {"regret_plateau": {"passed": bool(growth < 0.05 and min_regret >= -regret_tol),
                              "growth": growth, "window": [first, days], "min_daily_regret": min_regret,
                              "total": float(mean_cum[-1])}}

    ordering, final_ok, firsts = 0, True, []
    for r in res.runs:
        ke = kind_errors(r.errors[:days], res.kinds)
        fd = {k: int(first_day_below(v[:, None], 0.05)[0]) for k, v in ke.items()}
        firsts.append(fd)
        hp = fd.get("heatpump", days + 1)
        ok = fd.get("battery", 0) <= hp and fd.get("ev", 0) <= hp
        ordering += int(ok)
        per_sig = r.errors[days - 1].mean(axis=0)
        final_ok &= bool(np.all(per_sig < 0.1))
    need = int(np.ceil(0.8 * len(res.runs)))
    out["convergence_order"] = {"passed": bool(ordering >= need and final_ok), "runs_ordered": ordering,
                                "runs_needed": need, "all_below_0.1": final_ok, "first_days": firsts}

    daily = np.array([r.violation[:days].sum(axis=1) for r in res.runs]).mean(axis=0)
    day1 = float(daily[0])
    tail = float(daily[-min(violation_days, days):].mean())
    clair_total = float(np.sum(res.clairvoyant["violation"][:days]))
    if day1 > 0:
        passed = tail <= 0.01 * day1
    else:
        passed = clair_total <= 1e-6
    out["violation_decay"] = {"passed": bool(passed), "day1": day1, "final_mean": tail,
                              "clairvoyant_total": clair_total}

    ratios = [float(np.max(r.bigm_max_ratio[:days])) for r in res.runs]
    ratios.append(float(np.max(res.clairvoyant["bigm_max_ratio"][:days])))
    worst = max(ratios)
    out["bigm_audit"] = {"passed": bool(worst < 0.99), "max_ratio": worst}
    return out


def compare_reset(reset: Results, baseline: Results, plateau_days: int = 20, share: float = 0.8) -> dict:
    """Compare a run set with prior resets against the same experiment without resets.

    Passes when the reset variant ends with lower cumulative regret in at
    least ``share`` of the paired runs and its regret accumulated since the
    event grows by less than 5% over the final ``plateau_days``.
    """
    event = reset.manifest["config"]["event"]["day"]
    if event is None:
        raise ValueError("the reset experiment has no weight-change event")
    days = min(reset.days, baseline.days)
    pairs = {r.run: r for r in baseline.runs}
    finals = [(float(r.cumulative[days - 1]), float(pairs[r.run].cumulative[days - 1]))
              for r in reset.runs if r.run in pairs]
    lower = sum(a < b for a, b in finals)
    need = int(np.ceil(share * len(finals)))
    mean_cum = np.mean([r.cumulative[:days] for r in reset.runs], axis=0)
    before = mean_cum[event - 2] if event >= 2 else 0.0
    post = mean_cum[event - 1:] - before  # regret accumulated from the event day on
    growth = plateau_increase(post, max(1, len(post) - plateau_days + 1), len(post))
    return {"passed": bool(lower >= need and growth < 0.05), "runs_lower": lower, "runs_needed": need,
            "final_cumulative": finals, "post_event_growth": growth, "event_day": event,
            "resets": [sorted({d + 1 for d, rs in enumerate(r.resets) if rs}) for r in reset.runs]}


# --------------------------------------------------------------------------- figures


def _style():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False,
                         "svg.hashsalt": "ecpricing", "figure.dpi": 100})
    return plt


def plot_regret(res: Results, path: Path, fmt: str = "svg") -> Path:
    plt = _style()
    days = res.days
    agg = aggregate_runs([r.cumulative[:days] for r in res.runs])
    x = np.arange(1, days + 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.fill_between(x, agg["q05"], agg["q95"], color="C0", alpha=0.25, lw=0, label="5-95% of runs")
    ax.plot(x, agg["mean"], color="C0", label="mean")
    event = res.manifest["config"]["event"]["day"]
    if event:
        ax.axvline(event, color="0.4", ls="--", lw=0.8, label="weight change")
    ax.set_xlabel("day")
    ax.set_ylabel("cumulative regret [DKK]")
    ax.legend(frameon=False)
    fig.tight_layout()
    out = path.with_suffix(f".{fmt}")
    fig.savefig(out, metadata={"Date": None} if fmt == "svg" else None)
    plt.close(fig)
    return out


def plot_violation(res: Results, path: Path, fmt: str = "svg") -> Path:
    plt = _style()
    days = res.days
    v = np.mean([r.violation[:days] for r in res.runs], axis=0)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    im = ax.imshow(v.T, aspect="auto", origin="lower", cmap="magma_r", interpolation="nearest",
                   extent=(0.5, days + 0.5, -0.5, v.shape[1] - 0.5))
    ax.set_xlabel("day")
    ax.set_ylabel("period")
    fig.colorbar(im, ax=ax, label="violation above capacity [kWh]")
    fig.tight_layout()
    out = path.with_suffix(f".{fmt}")
    fig.savefig(out, metadata={"Date": None} if fmt == "svg" else None)
    plt.close(fig)
    return out


def plot_beliefs(res: Results, path: Path, snapshot_days: list[int], fmt: str = "svg") -> Path:
    """Box plots of the posterior-mean error per signature at the snapshot days."""
    plt = _style()
    snaps = [d for d in snapshot_days if 1 <= d <= res.days] or [res.days]
    fig, axes = plt.subplots(len(snaps), 1, figsize=(6.0, 1.8 * len(snaps) + 0.6), sharex=True, squeeze=False)
    for ax, d in zip(axes[:, 0], snaps):
        data = [np.concatenate([r.errors[d - 1, :, k] for r in res.runs]) for k in range(len(res.signatures))]
        ax.boxplot(data, widths=0.6, showfliers=True, flierprops={"markersize": 2})
        ax.set_ylabel(f"day {d}")
        ax.axhline(0.05, color="0.5", lw=0.6, ls=":")
    axes[-1, 0].set_xticks(range(1, len(res.signatures) + 1), res.signatures, rotation=45, ha="right")
    fig.supylabel("|posterior mean - true weight|")
    fig.tight_layout()
    out = path.with_suffix(f".{fmt}")
    fig.savefig(out, metadata={"Date": None} if fmt == "svg" else None)
    plt.close(fig)
    return out


def render_report(directory, fmt: str = "svg") -> dict:
    """Write ``summary.csv``, ``checks.json`` and figures; return the checks."""
    res = load_results(directory)
    days = res.days
    fig_dir = res.directory / "figures"
    fig_dir.mkdir(exist_ok=True)
    if days:
        agg = aggregate_runs([r.cumulative[:days] for r in res.runs])
        viol = aggregate_runs([r.violation[:days].sum(axis=1) for r in res.runs])
        write_table(res.directory / "summary.csv", {
            "day": list(range(1, days + 1)),
            "cumulative_regret_mean": agg["mean"].tolist(),
            "cumulative_regret_q05": agg["q05"].tolist(),
            "cumulative_regret_q95": agg["q95"].tolist(),
            "violation_mean": viol["mean"].tolist(),
            "clairvoyant_violation": res.clairvoyant["violation"][:days].tolist(),
        })
        plot_regret(res, fig_dir / "cumulative_regret", fmt)
        plot_violation(res, fig_dir / "violation_heatmap", fmt)
        plot_beliefs(res, fig_dir / "belief_error_boxplots", res.manifest["config"]["snapshot_days"], fmt)
    checks = check_results(res) if days else {}
    (res.directory / "checks.json").write_text(json.dumps(checks, indent=1, default=float) + "\n")
    return checks
