"""Exhaustive enumeration of blocking masks, one full trace each."""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass

import numpy as np

from .adjuster import TIE_DECIMALS, actual_outcome, run_traces
from .cpflow import TraceConfig
from .grid import GridCase

MAX_SUBSET = 20


class OracleGuardError(ValueError):
    pass


@dataclass(frozen=True)
class OracleRow:
    mask: tuple[int, ...]
    lm: float
    terminal: str
    feasible: bool
    adjustments: tuple[float, ...]

    @property
    def sum_adjustment(self) -> float:
        return float(sum(self.adjustments))

    @property
    def blocked(self) -> int:
        return sum(self.mask)


@dataclass
class OracleTable:
    rg_ids: tuple[int, ...]
    lambda_limit: float
    rows: list[OracleRow]
    optimum: OracleRow | None

    @property
    def traces(self) -> int:
        return len(self.rows)

    def row(self, mask) -> OracleRow:
        key = tuple(int(b) for b in mask)
        return next(r for r in self.rows if r.mask == key)


def brute_force(case: GridCase, lambda_limit: float, subset=None,
                config: TraceConfig | None = None, jobs: int = 1) -> OracleTable:
    config = config or TraceConfig()
    ids = case.rg_ids
    subset = ids if subset is None else sorted(set(subset))
    if len(subset) > MAX_SUBSET:
        raise OracleGuardError(f"{len(subset)} RGs would need 2^{len(subset)} traces; limit is {MAX_SUBSET}")
    idx = [case.rg_index(i) for i in subset]
    masks = []
    for bits in itertools.product((0, 1), repeat=len(idx)):
        m = np.zeros(case.n_rg, dtype=int)
        m[idx] = bits
        masks.append(m)
    masks.sort(key=lambda m: tuple(m))
    curves = run_traces(case, masks, config, jobs)
    rows = []
    for m, curve in zip(masks, curves):
        ok, dc = actual_outcome(case, curve, lambda_limit)
        rows.append(OracleRow(tuple(int(b) for b in m), curve.load_margin, curve.terminal, ok,
                              tuple(float(d) for d in dc)))
    feasible = [r for r in rows if r.feasible]
    optimum = min(feasible, key=lambda r: (round(r.sum_adjustment, TIE_DECIMALS), r.blocked, r.mask)) if feasible else None
    return OracleTable(tuple(ids), float(lambda_limit), rows, optimum)


def oracle_table_text(table: OracleTable) -> str:
    buf = io.StringIO()
    ids = table.rg_ids
    header = ["mask"] + ["lm", "terminal", "feasible", "sum_adjustment"] + [f"dc_rg{i}" for i in ids]
    buf.write(",".join(header) + "\n")
    for r in table.rows:
        row = ["".join(map(str, r.mask)), f"{r.lm:.11e}", r.terminal, str(int(r.feasible)),
               f"{r.sum_adjustment:.11e}"] + [f"{d:.11e}" for d in r.adjustments]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
