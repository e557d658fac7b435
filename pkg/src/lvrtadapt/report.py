"""Text and JSON renderings of pipeline results, plus run manifests."""
from __future__ import annotations

import io
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .adjuster import CandidateSolution, PipelineResult


def _num(x) -> str:
    return "" if x is None else f"{x:.11e}"


def _ids(ids) -> str:
    return ";".join(str(i) for i in ids)


def mask_ids(rg_ids, mask) -> tuple[int, ...]:
    return tuple(i for i, b in zip(rg_ids, mask) if b)


def _row(rg_ids, rank, cand: CandidateSolution) -> list[str]:
    est = cand.adjustment_estimate
    act = cand.adjustment_actual
    n = len(rg_ids)
    return ([str(rank), "".join(map(str, cand.key())), _ids(mask_ids(rg_ids, cand.mask)),
             _num(cand.lm_estimate), _num(cand.lm_actual),
             str(int(cand.feasible)), "" if cand.feasible_actual is None else str(int(cand.feasible_actual)),
             cand.terminal_actual or "",
             _num(None if est is None else cand.sum_estimate), _num(None if act is None else cand.sum_actual)]
            + [_num(None if est is None else est[k]) for k in range(n)]
            + [_num(None if act is None else act[k]) for k in range(n)])


def report_text(result: PipelineResult) -> str:
    """Delimited report: a header block, then one section per table."""
    case = result.base_curve.case
    ids = case.rg_ids
    base = result.base_curve
    buf = io.StringIO()
    w = buf.write
    w("[summary]\n")
    for k, v in [("lambda_limit", _num(result.config.lambda_limit)), ("m", str(result.config.m)),
                 ("base_lm", _num(base.load_margin)), ("base_terminal", base.terminal),
                 ("base_trip_order", _ids(base.trip_order())), ("held", _ids(result.force_blocked)),
                 ("critical", _ids(result.critical_set)), ("adjustable", _ids(result.adjustable)),
                 ("candidates", str(len(result.candidates))), ("screened_feasible", str(len(result.feasible))),
                 ("scenario", "" if result.scenario is None else str(result.scenario)),
                 ("cpflow_calls", str(result.cpflow_calls)),
                 ("best", "" if result.best is None else _ids(mask_ids(ids, result.best.mask)) or "none"),
                 ("message", result.message)]:
        w(f"{k},{v}\n")
    if result.sensitivity is not None:
        w("\n[sensitivity]\nrg_id,a\n")
        for i, a in zip(ids, result.sensitivity.a):
            w(f"{i},{_num(a)}\n")
    header = (["rank", "mask", "blocked", "lm_estimate", "lm_actual", "feasible_estimate", "feasible_actual",
               "terminal_actual", "sum_estimate", "sum_actual"]
              + [f"dc_est_rg{i}" for i in ids] + [f"dc_act_rg{i}" for i in ids])
    w("\n[evaluated]\n" + ",".join(header) + "\n")
    for r, cand in enumerate(result.evaluated, 1):
        w(",".join(_row(ids, r, cand)) + "\n")
    w("\n[screened]\n" + ",".join(header) + "\n")
    for cand in result.candidates:
        w(",".join(_row(ids, 0, cand)) + "\n")
    if result.new_settings:
        w("\n[new_settings]\nrg_id,c_lvrt_original,c_lvrt_new\n")
        c0 = dict(zip(ids, case.c_lvrt()))
        for i in ids:
            w(f"{i},{_num(c0[i])},{_num(result.new_settings[i])}\n")
    return buf.getvalue()


def table_view(result: PipelineResult) -> str:
    """Short human-readable comparison of the evaluated candidates."""
    ids = result.base_curve.case.rg_ids
    lines = [f"{'blocked':<12}{'LM est':>9}{'LM act':>9}{'sum dc est':>12}{'sum dc act':>12}  status"]
    for cand in result.evaluated:
        status = "feasible" if cand.feasible_actual else "infeasible (lambda < limit)"
        lines.append(f"{_ids(mask_ids(ids, cand.mask)) or 'none':<12}{cand.lm_estimate:>9.4f}"
                     f"{cand.lm_actual:>9.4f}{cand.sum_estimate:>12.4f}{cand.sum_actual:>12.4f}  {status}")
    return "\n".join(lines)


def report_dict(result: PipelineResult) -> dict:
    ids = result.base_curve.case.rg_ids
    best = result.best
    return {
        "rg_ids": list(ids),
        "lambda_limit": result.config.lambda_limit,
        "base_lm": result.base_curve.load_margin,
        "cpflow_calls": result.cpflow_calls,
        "best_mask": None if best is None else list(best.key()),
        "best_blocked": None if best is None else list(mask_ids(ids, best.mask)),
        "best_lm": None if best is None else best.lm_actual,
        "best_adjustment": None if best is None else [float(d) for d in best.adjustment_actual],
        "new_settings": {str(k): v for k, v in result.new_settings.items()},
        "message": result.message,
    }


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


@dataclass
class RunManifest:
    command: str
    case_path: str
    config: dict
    wall_time_s: float
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    python: str = field(default_factory=platform.python_version)

    def write(self, path) -> Path:
        return write_json(path, asdict(self))
