"""Command-line interface: ``ecpricing run|replay|validate|report``.

Exit codes
----------
0  success
1  unexpected internal error
2  configuration or input-data error
3  solver failure (a run or the clairvoyant baseline aborted)
4  acceptance failure (report checks failed, replay not byte-identical or not comparable)

Environment variables ``ECPRICING_BACKEND``, ``ECPRICING_SOLVER_PATH`` and
``ECPRICING_THREADS`` override the configured solver backend, executable
path and thread count.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, config_hash, load_config
from .data import DataError

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 1, 2, 3, 4

logger = logging.getLogger("ecpricing")


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    from .experiment import prepare

    if args.deep:
        prepare(cfg)  # loads data and draws the community
    print(f"ok\t{args.config}\tconfig_hash={config_hash(cfg)}\tdays={cfg.days}\truns={cfg.runs}"
          f"\tprosumers={cfg.prosumers}\tcapacity={cfg.capacity()}")
    return EXIT_OK


def _progress(run, rec):
    logger.info("run %d day %d: regret %.4f  violation %.4f kWh  %s %.2fs", run, rec.day, rec.regret,
                float(rec.violation.sum()), rec.method, rec.seconds)


def _cmd_run(args) -> int:
    from .experiment import ExperimentError, failed_runs, run_experiment

    cfg = load_config(args.config)
    if args.days is not None:
        cfg.days = args.days
    if args.runs is not None:
        cfg.runs = args.runs
    cfg.validate()
    try:
        out, manifest = run_experiment(cfg, args.output, jobs=args.jobs, plots=not args.no_plots,
                                       progress=_progress if args.verbose else None)
    except ExperimentError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    failed = failed_runs(manifest)
    for f in failed:
        print(f"run {f['run']} failed on day {f['failed_day']}: {f['error']}", file=sys.stderr)
    print(f"results\t{out}\truns_ok={cfg.runs - len(failed)}\truns_failed={len(failed)}")
    return EXIT_SOLVER if failed else EXIT_OK


def _cmd_replay(args) -> int:
    from .experiment import ExperimentError, ReplayError, replay

    try:
        res = replay(args.manifest, args.output, solver_seed=args.solver_seed, jobs=args.jobs)
    except ReplayError as exc:
        print(f"replay rejected: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except ExperimentError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if not res.comparable:
        print(f"non-comparable\t{res.directory}\t{res.reason}")
        return EXIT_ACCEPTANCE
    if not res.identical:
        print(f"mismatch\t{res.directory}\t{','.join(res.mismatches)}")
        return EXIT_ACCEPTANCE
    print(f"identical\t{res.directory}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .report import render_report

    directory = Path(args.results)
    if not (directory / "manifest.json").exists():
        raise ConfigError(f"{directory} is not a results directory (no manifest.json)")
    checks = render_report(directory, args.format)
    if args.baseline:
        from .report import compare_reset, load_results

        if not (Path(args.baseline) / "manifest.json").exists():
            raise ConfigError(f"{args.baseline} is not a results directory (no manifest.json)")
        try:
            checks["reset_vs_baseline"] = compare_reset(load_results(directory), load_results(args.baseline))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    print("criterion\tpassed\tdetails")
    for name, c in checks.items():
        details = json.dumps({k: v for k, v in c.items() if k != "passed"}, default=float)
        print(f"{name}\t{'PASS' if c['passed'] else 'FAIL'}\t{details}")
    if args.check and not all(c["passed"] for c in checks.values()):
        return EXIT_ACCEPTANCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecpricing", description="Learning-based price setting for an energy community.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per day")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="results directory (default: config output_dir)")
    r.add_argument("--days", type=int, help="override the number of days")
    r.add_argument("--runs", type=int, help="override the number of runs")
    r.add_argument("-j", "--jobs", type=int, default=1, help="parallel runs")
    r.add_argument("--no-plots", action="store_true")
    r.set_defaults(func=_cmd_run)

    rp = sub.add_parser("replay", help="re-run a recorded experiment and compare result files")
    rp.add_argument("manifest", help="manifest.json or the results directory containing it")
    rp.add_argument("-o", "--output", help="replay directory (default: <results>/replay)")
    rp.add_argument("--solver-seed", type=int, help="replay with a different solver seed (non-comparable)")
    rp.add_argument("-j", "--jobs", type=int, default=1)
    rp.set_defaults(func=_cmd_replay)

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("config")
    v.add_argument("--deep", action="store_true", help="also load the data and draw the community")
    v.set_defaults(func=_cmd_validate)

    rep = sub.add_parser("report", help="summarise a results directory and draw figures")
    rep.add_argument("results")
    rep.add_argument("--format", choices=("svg", "pdf"), default="svg")
    rep.add_argument("--check", action="store_true", help="exit with 4 if a convergence criterion fails")
    rep.add_argument("--baseline", help="results of the same experiment without prior resets; adds a "
                                        "reset-vs-baseline comparison")
    rep.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        from .experiment import SOLVER_ERRORS

        if isinstance(exc, SOLVER_ERRORS):
            print(f"solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        logger.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
