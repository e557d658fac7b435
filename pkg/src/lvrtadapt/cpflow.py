"""Continuation power flow with LVRT tripping of renewable units.

The tracer follows the equilibrium curve as the load scale grows, using a
pseudo-arclength predictor-corrector. After every accepted point, unblocked
RGs whose bus voltage is below their LVRT threshold are tripped one at a time
and the reduced system is re-solved at the same load scale. If that re-solve
has no solution the trace ends in ``collapse``; otherwise tracing resumes on
the new curve until the nose (``snb``) is localized.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .grid import GridCase
from .powerflow import (
    Network,
    SystemState,
    flat_state,
    network,
    solve,
    update_q_flags,
)

RG_TRIP, Q_LIMIT, SNB, COLLAPSE, HOLD = "rg_trip", "q_limit", "snb", "collapse", "rg_hold"


class TraceError(RuntimeError):
    """The trace could not be started or exceeded its point budget."""


@dataclass(frozen=True)
class TraceConfig:
    initial_step: float = 0.05
    min_step: float = 1e-5
    max_step: float = 0.2
    corrector_tolerance: float = 1e-8
    max_points: int = 2000
    snb_lambda_window: float = 1e-4
    # tighter inner target; the left null vector needs a well-localized nose
    nose_tangent_tolerance: float = 1e-8
    trip_voltage_tolerance: float = 1e-4
    q_limit_tolerance: float = 1e-6
    corrector_max_iter: int = 12

    def __post_init__(self):
        if not 0 < self.min_step <= self.initial_step <= self.max_step:
            raise ValueError("TraceConfig requires 0 < min_step <= initial_step <= max_step")
        if self.corrector_tolerance <= 0 or self.max_points < 2 or self.snb_lambda_window <= 0:
            raise ValueError("TraceConfig tolerances and max_points must be positive")


@dataclass(frozen=True)
class CurveEvent:
    kind: str
    lam: float
    subject: int | None
    index: int


@dataclass
class PvCurve:
    case: GridCase = field(repr=False)
    mask: np.ndarray
    points: list[SystemState]
    events: list[CurveEvent]
    load_margin: float
    terminal: str
    snb_state: SystemState | None
    nose_index: int
    held: tuple[int, ...] = ()
    config: TraceConfig = field(default_factory=TraceConfig, repr=False)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    def voltages(self) -> np.ndarray:
        return np.array([p.v for p in self.points])

    @property
    def final_status(self) -> np.ndarray:
        return self.points[self.nose_index].rg_status.copy()

    def trip_order(self) -> list[int]:
        return [e.subject for e in self.events if e.kind == RG_TRIP]

    def tripped_ids(self) -> list[int]:
        ids = self.case.rg_ids
        return [ids[j] for j in np.flatnonzero(self.final_status == 0)]


# -- continuation kernel ------------------------------------------------------

class _Tracer:
    def __init__(self, case: GridCase, mask, config: TraceConfig, hold_on_collapse: bool):
        self.case = case
        self.net: Network = network(case)
        self.cfg = config
        self.mask = np.asarray(mask, dtype=bool).copy()
        if self.mask.shape != (case.n_rg,):
            raise ValueError(f"blocking mask must have {case.n_rg} entries")
        self.held = np.zeros(case.n_rg, dtype=bool)
        self.hold_on_collapse = hold_on_collapse
        self.c = case.c_lvrt()
        self.rg_bus = self.net.rg_bus
        self.points: list[SystemState] = []
        self.events: list[CurveEvent] = []

    # extended system in reduced coordinates y = [x, lam]
    def _y(self, s: SystemState) -> np.ndarray:
        return np.append(self.net.pack(s), s.lam)

    def _state(self, y: np.ndarray, template: SystemState) -> SystemState:
        return self.net.unpack(y[:-1], template, lam=y[-1])

    def _ext_jac(self, s: SystemState) -> np.ndarray:
        return np.column_stack([self.net.jacobian(s), self.net.d_lambda(s.q_flags)])

    def tangent(self, s: SystemState, t_prev: np.ndarray | None) -> np.ndarray:
        """Unit tangent; oriented along ``t_prev`` or towards growing lam."""
        Je = self._ext_jac(s)
        border = t_prev if t_prev is not None else np.eye(Je.shape[1])[-1]
        A = np.vstack([Je, border])
        rhs = np.zeros(Je.shape[1])
        rhs[-1] = 1.0
        t = np.linalg.solve(A, rhs)
        return t / np.linalg.norm(t)

    def correct(self, s0: SystemState, t0: np.ndarray, h: float):
        """Pseudo-arclength corrector from ``s0`` along ``t0`` by arc ``h``."""
        y0 = self._y(s0)
        y = y0 + h * t0
        tol = self.cfg.corrector_tolerance
        for it in range(self.cfg.corrector_max_iter + 1):
            s = self._state(y, s0)
            f = self.net.residual(s)
            arc = t0 @ (y - y0) - h
            norm = max(float(np.max(np.abs(f))), abs(arc))
            if not np.isfinite(norm) or norm > 1e6 or np.any(s.v <= 0):
                return None, it
            if norm <= tol:
                return s, it
            if it == self.cfg.corrector_max_iter:
                break
            A = np.vstack([self._ext_jac(s), t0])
            try:
                dy = np.linalg.solve(A, -np.append(f, arc))
            except np.linalg.LinAlgError:
                return None, it
            y = y + dy
        return None, self.cfg.corrector_max_iter

    # event predicates -------------------------------------------------------
    def _tripable(self, s: SystemState) -> np.ndarray:
        return (s.rg_status == 1) & ~self.mask & ~self.held

    def violation_depth(self, s: SystemState) -> np.ndarray:
        depth = self.c - s.v[self.rg_bus]
        depth[~self._tripable(s)] = -np.inf
        return depth

    def _has_trip(self, s: SystemState) -> bool:
        return bool(np.any(self.violation_depth(s) > 0))

    def _q_excess(self, s: SystemState) -> float:
        """Largest reactive-limit excess of a regulating generator (<= 0 when none)."""
        net = self.net
        qg = net.gen_q(s)
        worst = -np.inf
        for g, flag in enumerate(s.q_flags):
            if not net.gen_regulates[g]:
                continue
            if flag == "free":
                worst = max(worst, qg[g] - net.q_max[g], net.q_min[g] - qg[g])
            else:
                k = net.gen_bus[g]
                sign = 1.0 if flag == "at_max" else -1.0
                worst = max(worst, sign * (s.v[k] - net.v_set[k]))
        return worst

    def _has_event(self, s: SystemState) -> bool:
        return self._has_trip(s) or update_q_flags(self.net, s) != s.q_flags

    def _event_close(self, s: SystemState) -> bool:
        depth = self.violation_depth(s)
        trip_ok = not np.any(depth > self.cfg.trip_voltage_tolerance)
        q_ok = self._q_excess(s) <= self.cfg.q_limit_tolerance
        return trip_ok and q_ok

    # bookkeeping ------------------------------------------------------------
    def _add(self, s: SystemState) -> int:
        self.points.append(s)
        if len(self.points) > self.cfg.max_points:
            raise TraceError(f"trace exceeded max_points={self.cfg.max_points}")
        return len(self.points) - 1

    def _event(self, kind: str, lam: float, subject: int | None) -> None:
        self.events.append(CurveEvent(kind, float(lam), subject, len(self.points) - 1))

    def _resolve(self, s: SystemState, status) -> SystemState | None:
        rep = solve(self.case, s.lam, status, s, tol=self.cfg.corrector_tolerance)
        if not rep.converged:
            rep = solve(self.case, s.lam, status, s, tol=self.cfg.corrector_tolerance, damped=True)
        return rep.state if rep.converged else None

    def handle_events(self, s: SystemState) -> SystemState | None:
        """Apply Q-limit switching then sequential LVRT trips at one load scale.

        Returns the post-event state, or None on loss of equilibrium.
        """
        flags = update_q_flags(self.net, s)
        if flags != s.q_flags:
            new = self._resolve(s, s.rg_status)
            if new is None:
                return None
            changed = [g for g, (a, b) in enumerate(zip(s.q_flags, new.q_flags)) if a != b]
            s = new
            self._add(s)
            for g in changed:
                self._event(Q_LIMIT, s.lam, self.case.generators[g].bus)
        ids = self.case.rg_ids
        while True:
            depth = self.violation_depth(s)
            if not np.any(depth > 0):
                return s
            worst = np.max(depth)
            j = int(np.flatnonzero(depth == worst)[0])
            status = s.rg_status.copy()
            status[j] = 0
            new = self._resolve(s, status)
            if new is None:
                if self.hold_on_collapse:
                    self.held[j] = True
                    self._event(HOLD, s.lam, ids[j])
                    continue
                self._event(RG_TRIP, s.lam, ids[j])
                self._event(COLLAPSE, s.lam, None)
                return None
            s = new
            self._add(s)
            self._event(RG_TRIP, s.lam, ids[j])

    def _bisect(self, s0, t0, lo, hi, s_hi, done, is_hi):
        """Shrink the arc bracket [lo, hi] until ``done(s_hi)``."""
        for _ in range(80):
            if done(s_hi) or hi - lo < 1e-13:
                break
            mid = 0.5 * (lo + hi)
            s_mid, _ = self.correct(s0, t0, mid)
            if s_mid is None:
                break
            if is_hi(s_mid):
                hi, s_hi = mid, s_mid
            else:
                lo = mid
        return hi, s_hi

    def run(self) -> PvCurve:
        cfg = self.cfg
        n_rg = self.case.n_rg
        rep = solve(self.case, 0.0, np.ones(n_rg, dtype=int), flat_state(self.case),
                    tol=cfg.corrector_tolerance)
        if not rep.converged:
            raise TraceError("base power flow at zero load scale did not converge")
        s = rep.state
        self._add(s)
        s = self.handle_events(s)
        if s is None:
            return self._finish(COLLAPSE, None)

        t = self.tangent(s, None)
        h = cfg.initial_step
        fast = 0
        while True:
            new, iters = self.correct(s, t, h)
            if new is None:
                fast = 0
                h *= 0.5
                if h < cfg.min_step:
                    # corrector cannot move: treat the current point as the nose
                    self._event(SNB, s.lam, None)
                    return self._finish(SNB, s, nose_index=len(self.points) - 1)
                continue
            t_new = self.tangent(new, t)
            passed_nose = t_new[-1] < 0 or new.lam < s.lam
            cand, h_cand = new, h
            if passed_nose:
                h_cand, cand = self._bisect(
                    s, t, 0.0, h, new,
                    done=lambda z: abs(self.tangent(z, t)[-1]) <= cfg.nose_tangent_tolerance,
                    is_hi=lambda z: self.tangent(z, t)[-1] < 0,
                )
                # pick the more accurate nose of the two bracket ends
                if cand.lam < s.lam:
                    cand, h_cand = s, 0.0
            if h_cand > 0 and self._has_event(cand):
                h_ev, ev = self._bisect(s, t, 0.0, h_cand, cand,
                                        done=self._event_close, is_hi=self._has_event)
                self._add(ev)
                s = self.handle_events(ev)
                if s is None:
                    return self._finish(COLLAPSE, None)
                t = self.tangent(s, None)
                h = max(min(h, cfg.max_step), cfg.min_step)
                fast = 0
                continue
            if passed_nose:
                nose_idx = self._add(cand) if h_cand > 0 else len(self.points) - 1
                self._event(SNB, cand.lam, None)
                if new.lam < cand.lam:
                    self._add(new)
                return self._finish(SNB, cand, nose_index=nose_idx)
            self._add(new)
            s, t = new, t_new
            fast = fast + 1 if iters <= 3 else 0
            if fast >= 4:
                h = min(2.0 * h, cfg.max_step)
                fast = 0

    def _finish(self, terminal: str, nose: SystemState | None, nose_index: int | None = None) -> PvCurve:
        lams = np.array([p.lam for p in self.points])
        if nose_index is None:
            nose_index = len(self.points) - 1
        ids = self.case.rg_ids
        return PvCurve(
            case=self.case,
            mask=self.mask.copy(),
            points=self.points,
            events=self.events,
            load_margin=float(lams.max()),
            terminal=terminal,
            snb_state=nose,
            nose_index=nose_index,
            held=tuple(ids[j] for j in np.flatnonzero(self.held)),
            config=self.cfg,
        )


def trace(case: GridCase, mask: Sequence[int] | np.ndarray | None = None,
          config: TraceConfig | None = None, hold_on_collapse: bool = False) -> PvCurve:
    """Trace the P-V curve with the RGs in ``mask`` blocked from tripping.

    With ``hold_on_collapse`` an RG whose trip would leave no equilibrium is
    held online instead (recorded as an ``rg_hold`` event and in ``held``),
    so the trace always reaches a nose.
    """
    if mask is None:
        mask = np.zeros(case.n_rg, dtype=int)
    return _Tracer(case, mask, config or TraceConfig(), hold_on_collapse).run()


def mask_from_ids(case: GridCase, rg_ids) -> np.ndarray:
    ids = case.rg_ids
    unknown = set(rg_ids) - set(ids)
    if unknown:
        raise ValueError(f"unknown RG ids: {sorted(unknown)}")
    return np.array([1 if i in set(rg_ids) else 0 for i in ids], dtype=int)


def state_at_lambda(curve: PvCurve, lam: float) -> SystemState:
    """System state on the traced curve at load scale ``lam`` (upper branch).

    At a jump the post-jump state is returned.
    """
    if lam > curve.load_margin:
        raise ValueError(f"lambda {lam} beyond load margin {curve.load_margin}")
    pts = curve.points[: curve.nose_index + 1]
    if lam < pts[0].lam:
        raise ValueError(f"lambda {lam} below the start of the curve")
    for p in reversed(pts):
        if p.lam == lam:
            return p
    for i in range(len(pts) - 2, -1, -1):
        a, b = pts[i], pts[i + 1]
        if not (a.lam < lam < b.lam):
            continue
        if not (np.array_equal(a.rg_status, b.rg_status) and a.q_flags == b.q_flags):
            continue
        w = (lam - a.lam) / (b.lam - a.lam)
        guess = a.with_(v=(1 - w) * a.v + w * b.v, theta=(1 - w) * a.theta + w * b.theta, lam=float(lam))
        rep = solve(curve.case, lam, a.rg_status, guess, tol=curve.config.corrector_tolerance,
                    q_limits=False, damped=True)
        if rep.converged:
            return rep.state
        raise ValueError(f"corrector failed to refine the state at lambda {lam}")
    raise ValueError(f"lambda {lam} not bracketed by a single curve segment")


# -- export -------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.11e}"


def curve_table(curve: PvCurve) -> str:
    """Delimited text table, one row per accepted point."""
    case = curve.case
    ids = case.bus_ids
    markers: dict[int, list[str]] = {}
    for e in curve.events:
        tag = e.kind if e.subject is None else f"{e.kind}:{e.subject}"
        markers.setdefault(e.index, []).append(tag)
    buf = io.StringIO()
    header = ["index", "lambda"] + [f"v_{b}" for b in ids] + [f"theta_{b}" for b in ids] + ["rg_status", "event"]
    buf.write(",".join(header) + "\n")
    for i, p in enumerate(curve.points):
        row = [str(i), _fmt(p.lam)]
        row += [_fmt(v) for v in p.v]
        row += [_fmt(a) for a in p.theta]
        row.append("".join(str(int(z)) for z in p.rg_status))
        row.append("|".join(markers.get(i, [])))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
