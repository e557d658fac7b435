"""Command-line entry point: ``lvrtadapt {validate,trace,adjust,oracle}``.

Exit codes: 0 ok, 2 invalid case or arguments, 3 missing case file,
4 base-case divergence, 5 no feasible adjustment, 6 oracle size guard.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .adjuster import PipelineConfig, run_pipeline
from .cpflow import TraceConfig, TraceError, curve_table, mask_from_ids, trace
from .grid import CaseError, bundled_case, emit_case, load_case_file
from .oracle import OracleGuardError, brute_force, oracle_table_text
from .report import RunManifest, mask_ids, report_dict, report_text, table_view, write_json

EXIT_OK, EXIT_INVALID, EXIT_MISSING, EXIT_DIVERGED, EXIT_INFEASIBLE, EXIT_GUARD = 0, 2, 3, 4, 5, 6
OUT_DIR_ENV = "LVRTADAPT_OUT_DIR"
BUNDLED = "bundled"


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load(path: str):
    if path == BUNDLED:
        return bundled_case()
    if not Path(path).is_file():
        raise _Exit(EXIT_MISSING, f"case file not found: {path}")
    try:
        return load_case_file(path)
    except CaseError as exc:
        raise _Exit(EXIT_INVALID, f"invalid case: {exc}") from None


def _ids(case, text: str | None) -> list[int]:
    if not text:
        return []
    if text.strip().lower() == "all":
        return list(case.rg_ids)
    try:
        ids = [int(s) for s in text.replace(";", ",").split(",") if s.strip()]
        mask_from_ids(case, ids)
    except ValueError as exc:
        raise _Exit(EXIT_INVALID, f"bad RG id list {text!r}: {exc}") from None
    return ids


def _trace_config(args) -> TraceConfig:
    try:
        return TraceConfig(initial_step=args.initial_step, min_step=args.min_step, max_step=args.max_step)
    except ValueError as exc:
        raise _Exit(EXIT_INVALID, str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or "lvrtadapt-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(args, command, t0, outputs, config) -> Path:
    path = _out_dir(args) / f"manifest_{command}.json"
    RunManifest(command=command, case_path=args.case, config=config,
                wall_time_s=round(time.perf_counter() - t0, 3),
                outputs=[str(p) for p in outputs]).write(path)
    return path


def cmd_validate(args) -> int:
    _load(args.case)
    print(f"{args.case}: valid")
    return EXIT_OK


def cmd_trace(args) -> int:
    t0 = time.perf_counter()
    case = _load(args.case)
    mask = mask_from_ids(case, _ids(case, args.block))
    cfg = _trace_config(args)
    try:
        curve = trace(case, mask, cfg, hold_on_collapse=args.hold)
    except TraceError as exc:
        raise _Exit(EXIT_DIVERGED, f"trace failed: {exc}") from None
    out = _out_dir(args)
    table = out / "curve.csv"
    table.write_text(curve_table(curve))
    outputs = [table]
    if args.plot:
        from .plotting import plot_pv_curve
        buses = [int(b) for b in args.buses.split(",")] if args.buses else None
        outputs.append(plot_pv_curve(curve, out / "pv_curve.svg", buses))
    _manifest(args, "trace", t0, outputs, {"block": list(mask_ids(case.rg_ids, mask)), "hold": args.hold,
                                           "trace": asdict(cfg)})
    print(f"lm: {curve.load_margin:.6f}")
    print(f"terminal: {curve.terminal}")
    print(f"trip order: {' '.join(map(str, curve.trip_order())) or 'none'}")
    if curve.held:
        print(f"held online: {' '.join(map(str, curve.held))}")
    for p in outputs:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_adjust(args) -> int:
    t0 = time.perf_counter()
    case = _load(args.case)
    try:
        config = PipelineConfig(lambda_limit=args.lambda_limit, m=args.m, trace=_trace_config(args), jobs=args.jobs)
    except ValueError as exc:
        raise _Exit(EXIT_INVALID, str(exc)) from None
    try:
        result = run_pipeline(case, config)
    except TraceError as exc:
        raise _Exit(EXIT_DIVERGED, f"base trace failed: {exc}") from None
    out = _out_dir(args)
    outputs = [out / "report.txt", out / "report.json"]
    outputs[0].write_text(report_text(result))
    write_json(outputs[1], report_dict(result))
    if result.best is not None:
        adjusted = case.with_rg_settings(result.new_settings)
        path = out / "new_settings.json"
        path.write_text(emit_case(adjusted.replace(name=f"{case.name}_adjusted" if case.name else "adjusted")))
        outputs.append(path)
    if args.plot:
        from .plotting import plot_candidates, plot_pv_curve
        outputs.append(plot_pv_curve(result.base_curve, out / "base_pv_curve.svg"))
        if result.evaluated:
            outputs.append(plot_candidates(result, out / "candidates.svg"))
    _manifest(args, "adjust", t0, outputs, {"lambda_limit": config.lambda_limit, "m": config.m,
                                            "fit_points": config.fit_points, "jobs": config.jobs,
                                            "trace": asdict(config.trace)})
    print(f"base lm: {result.base_curve.load_margin:.6f} ({result.base_curve.terminal})")
    if result.evaluated:
        print(table_view(result))
    print(f"cpflow_calls: {result.cpflow_calls}")
    for p in outputs:
        print(f"wrote {p}")
    if result.best is None:
        print(f"no feasible adjustment: {result.message}", file=sys.stderr)
        return EXIT_INFEASIBLE
    blocked = mask_ids(case.rg_ids, result.best.mask)
    print(f"best: block {' '.join(map(str, blocked)) or 'none'}, lm {result.best.lm_actual:.6f}, "
          f"total reduction {result.best.sum_actual:.6f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    t0 = time.perf_counter()
    case = _load(args.case)
    subset = _ids(case, args.subset) or None
    try:
        table = brute_force(case, args.lambda_limit, subset, _trace_config(args), args.jobs)
    except OracleGuardError as exc:
        raise _Exit(EXIT_GUARD, str(exc)) from None
    except TraceError as exc:
        raise _Exit(EXIT_DIVERGED, f"trace failed: {exc}") from None
    out = _out_dir(args)
    path = out / "oracle.csv"
    path.write_text(oracle_table_text(table))
    _manifest(args, "oracle", t0, [path], {"lambda_limit": args.lambda_limit, "subset": subset,
                                          "jobs": args.jobs})
    print(f"traces: {table.traces}")
    if table.optimum is None:
        print("optimum: none feasible")
    else:
        o = table.optimum
        print(f"optimum: block {' '.join(map(str, mask_ids(case.rg_ids, o.mask))) or 'none'}, "
              f"lm {o.lm:.6f}, total reduction {o.sum_adjustment:.6f}")
    print(f"wrote {path}")
    if args.compare:
        try:
            report = json.loads(Path(args.compare).read_text())
        except FileNotFoundError:
            raise _Exit(EXIT_MISSING, f"report not found: {args.compare}") from None
        theirs = report.get("best_mask")
        mine = None if table.optimum is None else list(table.optimum.mask)
        print("MATCH" if theirs == mine else "MISMATCH")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lvrtadapt", description="LVRT settings adjustment for voltage security.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", default=BUNDLED, help="case file (default: bundled 9-bus case)")
    common.add_argument("--out-dir", default=None, help=f"output directory (default: ${OUT_DIR_ENV} or ./lvrtadapt-out)")
    d = TraceConfig()
    common.add_argument("--initial-step", type=float, default=d.initial_step)
    common.add_argument("--min-step", type=float, default=d.min_step)
    common.add_argument("--max-step", type=float, default=d.max_step)

    s = sub.add_parser("validate", parents=[common], help="load and validate a case")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("trace", parents=[common], help="trace one P-V curve")
    s.add_argument("--block", default=None, help="RG ids to exempt from tripping, comma separated, or 'all'")
    s.add_argument("--hold", action="store_true", help="hold an RG online if its trip would collapse the system")
    s.add_argument("--plot", action="store_true", help="also write pv_curve.svg")
    s.add_argument("--buses", default=None, help="buses to plot (default: RG buses)")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("adjust", parents=[common], help="run the adjustment pipeline")
    s.add_argument("--lambda-limit", type=float, required=True)
    s.add_argument("--m", type=int, default=5, help="candidates traced in the final step")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_adjust)

    s = sub.add_parser("oracle", parents=[common], help="brute-force every blocking mask")
    s.add_argument("--lambda-limit", type=float, required=True)
    s.add_argument("--subset", default=None, help="RG ids to enumerate (default: all)")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--compare", default=None, help="report.json from 'adjust' to compare against")
    s.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _Exit as exc:
        print(exc, file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
