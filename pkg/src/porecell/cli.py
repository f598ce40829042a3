"""Command-line entry point: ``porecell {tabulate, solve, verify, mms}``.

Exit codes: 0 success, 1 configuration error, 2 solver error, 3 verification
failure.  The coefficient cache lives in ``$PORECELL_CACHE`` (default
``~/.cache/porecell``) unless ``--cache-dir`` is given.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3

# minimum observed order per MMS case
MMS_THRESHOLDS = {"darcy": 1.9, "heat": 1.9, "transport": 1.9, "coupled": 0.9}


def _err(msg):
    print(f"porecell: {msg}", file=sys.stderr)


def _progress_row(row, detail):
    R, theta, d, k, ad, ak = row
    print(
        f"  R={R:.6f}  theta={theta:.6f}  d*={d:.6e}  k*={k:.6e}  "
        f"aniso(D*)={ad:.2e}  aniso(K*)={ak:.2e}  dual_gap={detail['dual_gap']:.1e}",
        flush=True,
    )


def _load_config(path):
    from .config import parse_config

    return parse_config(path)


def _table(config, args):
    from .cell_problems import build_table, cache_paths

    tc = config.table_config()
    csv_path, _ = cache_paths(tc, args.cache_dir)
    print(f"coefficient table: {tc.n_samples} samples, h=1/{tc.cell_resolution}, {tc.formulation} cell", flush=True)
    table, hit = build_table(tc, cache_dir=args.cache_dir, workers=args.workers, progress=_progress_row, use_cache=not args.no_cache)
    if hit:
        print(f"cache hit: {csv_path} (no recomputation)")
    elif not args.no_cache:
        print(f"cached: {csv_path}")
    return table


def cmd_tabulate(args) -> int:
    from .cell_problems import write_table

    config = _load_config(args.config)
    table = _table(config, args)
    outdir = Path(args.output or config["output"]["dir"])
    csv_path, meta_path = write_table(table, outdir / "coefficients.csv")
    print(f"wrote {csv_path} and {meta_path}")
    if not table.monotone:
        print("warning: d* or k* is not strictly decreasing in R", file=sys.stderr)
    return EXIT_OK


def cmd_solve(args) -> int:
    from .config import build_problem, check_peclet
    from .macro_solver import run_problem
    from .output import write_trajectory

    config = _load_config(args.config)
    table = _table(config, args)
    problem = build_problem(config, table=table)
    pe = check_peclet(problem)
    n_steps = int(round(problem.T / problem.dt))
    report_every = max(1, n_steps // 10)

    def callback(n, state):
        if n % report_every == 0 or n == n_steps:
            print(f"  step {n}/{n_steps}  t={state.time:.6g}  u in [{state.u0.min():.4g}, {state.u0.max():.4g}]  "
                  f"R in [{state.R0.min():.4g}, {state.R0.max():.4g}]", flush=True)

    traj = run_problem(problem, couple=not args.decoupled, callback=callback)
    outdir = Path(args.output or config["output"]["dir"])
    written = write_trajectory(traj, outdir, config.hash(), tuple(config["output"]["formats"]))
    print(f"wrote {len(written)} files to {outdir}; clamps={traj.clamps}, Peclet initial {pe:.3g} max {traj.max_peclet:.3g}")
    if traj.max_peclet > 2.0:
        print("warning: element Peclet number exceeded 2 during the run", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .output import header_line
    from .verify import format_report, run_verification

    level = "full" if args.full else "fast"
    settings = {"level": level, "perturb_adjugate": args.perturb_adjugate, "version": __version__}
    digest = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()
    t0 = time.perf_counter()

    def progress(name, rows, dt):
        failed = [r.name for r in rows if not r.passed]
        state = "ok" if not failed else "FAIL: " + ", ".join(failed)
        print(f"  {name:<16s} {dt:6.1f}s  {state}", file=sys.stderr, flush=True)

    rows = run_verification(level, perturb_adjugate=args.perturb_adjugate, progress=progress)
    report = format_report(rows, header=header_line(digest))
    if args.report:
        from .cell_problems import _atomic_write

        _atomic_write(Path(args.report), report)
    sys.stdout.write(report)
    n_fail = sum(not r.passed for r in rows)
    print(f"{len(rows) - n_fail}/{len(rows)} checks passed in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK if n_fail == 0 else EXIT_VERIFY


def cmd_mms(args) -> int:
    from .mms import run_case

    table = run_case(args.case)
    print(table.format())
    order = table.min_order
    need = MMS_THRESHOLDS[args.case]
    ok = order >= need
    print(f"# min order {order:.4f} (required >= {need}): {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    from .mms import CASES

    p = argparse.ArgumentParser(prog="porecell", description="Two-scale reactive transport with evolving grains.")
    p.add_argument("--version", action="version", version=f"porecell {__version__}")
    p.add_argument("--cache-dir", default=None, help="coefficient cache directory (overrides $PORECELL_CACHE)")
    sub = p.add_subparsers(dest="command", required=True)

    def table_opts(sp):
        sp.add_argument("config", help="scenario JSON file")
        sp.add_argument("--output", default=None, help="output directory (default: output.dir of the config)")
        sp.add_argument("--workers", type=int, default=1, help="processes for the cell problems")
        sp.add_argument("--no-cache", action="store_true", help="recompute the table and leave the cache untouched")

    sp = sub.add_parser("tabulate", help="compute the coefficient table of a scenario")
    table_opts(sp)
    sp.set_defaults(func=cmd_tabulate)

    sp = sub.add_parser("solve", help="run the macroscopic simulation")
    table_opts(sp)
    sp.add_argument("--decoupled", action="store_true", help="freeze the radius (fixed-porosity baseline)")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("verify", help="run the identity and property checks")
    sp.add_argument("--full", action="store_true", help="fine meshes and the 17-sample table")
    sp.add_argument("--report", default=None, help="also write the CSV report to this path")
    sp.add_argument("--perturb-adjugate", type=float, default=0.0, metavar="EPS", help="test hook: add EPS*diag(y) to A")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("mms", help="manufactured-solution convergence study")
    sp.add_argument("case", choices=CASES)
    sp.set_defaults(func=cmd_mms)
    return p


def main(argv=None) -> int:
    from .config import ConfigError

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except RuntimeError as exc:  # SolverError, SimulationError and failed cell solves
        _err(f"solver error: {exc}")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
