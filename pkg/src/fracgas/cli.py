"""Command-line interface.

    fracgas run <config>
    fracgas converge <config> --nt 10,20,40,80 [--reference-nt 320]
    fracgas contrast <config> --kf 1e3,1e6,1e9 --basis fixed:1 --basis adaptive:1e-3

Exit codes: 0 ok, 1 configuration error, 2 solver failure.  FRACGAS_THREADS
caps the BLAS thread pool (results are single-process deterministic either
way).
"""

from __future__ import annotations

import argparse
import os
import sys

from fracgas.scenario import (ConfigError, contrast_sweep, convergence_study,
                              load_scenario, run_scenario, write_table_csv)
from fracgas.timestep import SolverFailure

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVER = 2


def _apply_thread_limit() -> None:
    threads = os.environ.get("FRACGAS_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _parse_floats(raw: str):
    return [float(v) for v in raw.split(",") if v.strip()]


def _parse_ints(raw: str):
    return [int(v) for v in raw.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracgas",
        description="Gas transport in fractured porous media: linearly implicit "
                    "scheme with an adaptive spectral two-grid preconditioner.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario")
    run_p.add_argument("config", help="scenario config file")

    conv_p = sub.add_parser("converge", help="time-step convergence study")
    conv_p.add_argument("config")
    conv_p.add_argument("--nt", default="10,20,40,80",
                        help="comma-separated step counts (default 10,20,40,80)")
    conv_p.add_argument("--reference-nt", type=int, default=320,
                        help="Picard reference step count (default 320)")
    conv_p.add_argument("--out", default=None, help="CSV output path")

    con_p = sub.add_parser("contrast", help="permeability contrast sweep")
    con_p.add_argument("config")
    con_p.add_argument("--kf", default="1e3,1e6,1e9",
                       help="comma-separated contrasts (default 1e3,1e6,1e9)")
    con_p.add_argument("--basis", action="append", default=None,
                       help="basis config like fixed:4 or adaptive:1e-3 "
                            "(repeatable; default adaptive:1e-3)")
    con_p.add_argument("--out", default=None, help="CSV output path")
    return parser


def cmd_run(args) -> int:
    sc = load_scenario(args.config)
    report = run_scenario(sc)
    avg = report.average_iterations
    print(f"steps: {len(report.iterations)}  average iterations: {avg:.1f}  "
          f"total: {report.total_iterations}")
    if report.n_coarse is not None:
        print(f"coarse space size: {report.n_coarse}")
    print(f"concentration range: [{min(report.c_min):.6g}, {max(report.c_max):.6g}]")
    print(f"bounds check: {'ok' if report.bounds_check.get('ok') else 'FAILED'}  "
          f"hypothesis violations: {report.hypothesis_violations}  "
          f"physical-range violations: {report.physical_bound_violations}")
    for phase, seconds in report.timings.items():
        print(f"  {phase:10s} {seconds:8.2f} s")
    if sc.output_dir:
        print(f"reports written to {sc.output_dir}")
    return EXIT_OK


def cmd_converge(args) -> int:
    sc = load_scenario(args.config)
    rows = convergence_study(sc, _parse_ints(args.nt), reference_nt=args.reference_nt)
    print(f"{'N_t':>6s} {'error %':>12s} {'ratio':>8s} {'avg its':>8s}")
    for r in rows:
        ratio = f"{r['ratio']:.2f}" if r["ratio"] else "-"
        print(f"{r['n_steps']:>6d} {r['error_pct']:>12.5f} {ratio:>8s} "
              f"{r['average_iterations']:>8.1f}")
    if args.out:
        write_table_csv(args.out, rows)
        print(f"table written to {args.out}")
    return EXIT_OK


def _expand_basis_args(raw_list):
    # "fixed:1,2,4" means one sweep row per count; same for threshold lists
    out = []
    for raw in raw_list:
        kind, _, values = raw.partition(":")
        for v in values.split(","):
            out.append(f"{kind}:{v.strip()}")
    return out


def cmd_contrast(args) -> int:
    sc = load_scenario(args.config)
    kf_list = _parse_floats(args.kf)
    basis_list = _expand_basis_args(args.basis or ["adaptive:1e-3"])
    rows = contrast_sweep(sc, kf_list, basis_list)
    header = f"{'basis':>16s}" + "".join(f"{f'kf={k:g}':>12s}" for k in kf_list)
    print(header)
    for r in rows:
        cells = "".join(f"{str(r[f'kf_{k:g}']):>12s}" for k in kf_list)
        print(f"{r['basis']:>16s}{cells}")
    if args.out:
        write_table_csv(args.out, rows)
        print(f"table written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    _apply_thread_limit()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "converge":
            return cmd_converge(args)
        if args.command == "contrast":
            return cmd_contrast(args)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
