"""Five-step search for the smallest LVRT reductions that secure a load margin.

1. trace the base P-V curve (RGs whose trip would collapse the system are held);
2. flag critical RGs by extrapolating a fitted parabola to ``lambda_limit``;
3. screen every blocking mask over the adjustable RGs with a linear
   load-margin estimate taken at the base nose;
4. estimate the LVRT reduction each surviving mask needs;
5. trace only the ``m`` cheapest masks and keep the best one.
"""
from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cpflow import COLLAPSE, HOLD, RG_TRIP, SNB, PvCurve, TraceConfig, state_at_lambda, trace
from .grid import GridCase
from .powerflow import SystemState, network, solve
from .sensitivity import LmSensitivity, SnbInfo, lm_sensitivity, snb_info

HOMOTOPY_STEPS = 10
HOMOTOPY_MIN_FRACTION = 1.0 / 80.0
# totals closer than this are ties; state refinement leaves ~1e-10 noise
TIE_DECIMALS = 6


@dataclass(frozen=True)
class PipelineConfig:
    lambda_limit: float
    m: int = 5
    fit_points: int = 8
    trace: TraceConfig = field(default_factory=TraceConfig)
    jobs: int = 1
    # "v_of_lambda" fits V = a lam^2 + b lam + c; "lambda_of_v" fits the nose parabola
    fit_orientation: str = "v_of_lambda"

    def __post_init__(self):
        if not self.lambda_limit > 0:
            raise ValueError("lambda_limit must be > 0")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.fit_points < 3:
            raise ValueError("fit_points must be >= 3")
        if self.fit_orientation not in ("v_of_lambda", "lambda_of_v"):
            raise ValueError("fit_orientation must be 'v_of_lambda' or 'lambda_of_v'")


@dataclass
class CandidateSolution:
    mask: np.ndarray
    delta_status: np.ndarray
    lm_estimate: float
    feasible: bool
    adjustment_estimate: np.ndarray | None = None
    v_estimate: np.ndarray | None = None
    estimate_failed: bool = False
    lm_actual: float | None = None
    adjustment_actual: np.ndarray | None = None
    feasible_actual: bool | None = None
    terminal_actual: str | None = None

    @property
    def blocked(self) -> int:
        return int(np.sum(self.mask))

    def key(self) -> tuple:
        return tuple(int(b) for b in self.mask)

    @property
    def sum_estimate(self) -> float:
        return float(np.sum(self.adjustment_estimate))

    @property
    def sum_actual(self) -> float:
        return float(np.sum(self.adjustment_actual))


@dataclass
class CriticalFit:
    rg_id: int
    coefficients: np.ndarray | None
    v_estimate: float | None
    critical: bool
    linear_fallback: bool = False
    no_root: bool = False


@dataclass
class PipelineResult:
    config: PipelineConfig
    base_curve: PvCurve
    force_blocked: tuple[int, ...]
    critical_set: tuple[int, ...] = ()
    critical_fits: list[CriticalFit] = field(default_factory=list)
    adjustable: tuple[int, ...] = ()
    snb: SnbInfo | None = None
    sensitivity: LmSensitivity | None = None
    candidates: list[CandidateSolution] = field(default_factory=list)
    evaluated: list[CandidateSolution] = field(default_factory=list)
    best: CandidateSolution | None = None
    new_settings: dict[int, float] = field(default_factory=dict)
    cpflow_calls: int = 1
    scenario: int | None = None
    message: str = ""

    @property
    def feasible(self) -> list[CandidateSolution]:
        return [c for c in self.candidates if c.feasible]


# -- step 2 ------------------------------------------------------------------

def fit_window(base_curve: PvCurve, fit_points: int) -> list[SystemState]:
    """Last ``fit_points`` points before the first status change or the nose."""
    pts = base_curve.points[: base_curve.nose_index + 1]
    first = pts[0].rg_status
    window = []
    for p in pts:
        if not np.array_equal(p.rg_status, first):
            break
        if window and p.lam <= window[-1].lam:
            continue
        window.append(p)
    return window[-fit_points:]


def extrapolate_voltage(v: np.ndarray, lam: np.ndarray, lambda_limit: float) -> tuple:
    """Fit ``V = a lam^2 + b lam + c`` and evaluate it at ``lambda_limit``.

    Same return convention as :func:`predict_voltage`; ``no_root`` is never set.
    """
    v = np.asarray(v, float)
    lam = np.asarray(lam, float)
    if float(np.ptp(lam)) < 1e-12:
        return None, float(np.mean(v)), True, False
    coef = np.polyfit(lam, v, 2)
    return coef, float(np.polyval(coef, lambda_limit)), False, False


def predict_voltage(v: np.ndarray, lam: np.ndarray, lambda_limit: float) -> tuple:
    """Fit ``lam = a V^2 + b V + c`` and solve for V at ``lambda_limit``.

    Returns ``(coefficients, v_est, linear_fallback, no_root)``; ``v_est`` is
    None when the fitted parabola peaks below ``lambda_limit``.
    """
    v = np.asarray(v, float)
    lam = np.asarray(lam, float)
    span = float(np.ptp(v))
    if span < 1e-9:
        return None, float(np.mean(v)), True, False
    coef = np.polyfit(v, lam, 2)
    a, b, c = coef
    lam_span = max(float(np.ptp(lam)), 1e-12)
    if abs(a) * span * span < 1e-9 * lam_span:
        b, c = np.polyfit(v, lam, 1)
        if abs(b) < 1e-14:
            return coef, float(np.mean(v)), True, False
        return coef, float((lambda_limit - c) / b), True, False
    disc = b * b - 4 * a * (c - lambda_limit)
    if disc < 0:
        return coef, None, False, True
    r = np.sqrt(disc)
    roots = sorted(((-b - r) / (2 * a), (-b + r) / (2 * a)))
    vertex = -b / (2 * a)
    # the branch holding the fitted points
    root = roots[1] if np.mean(v) >= vertex else roots[0]
    return coef, float(root), False, False


def identify_critical(case: GridCase, base_curve: PvCurve, config: PipelineConfig) -> list[CriticalFit]:
    window = fit_window(base_curve, config.fit_points)
    if len(window) < 3:
        raise ValueError("base curve has too few points before the first trip for the fit")
    lam = np.array([p.lam for p in window])
    fits = []
    for j, u in enumerate(case.rg_units):
        if not any(p.rg_status[j] == 1 for p in base_curve.points):
            continue
        k = case.bus_index(u.bus)
        v = np.array([p.v[k] for p in window])
        fit = extrapolate_voltage if config.fit_orientation == "v_of_lambda" else predict_voltage
        coef, v_est, linear, no_root = fit(v, lam, config.lambda_limit)
        critical = no_root or v_est < u.c_lvrt_original
        fits.append(CriticalFit(u.id, coef, v_est, bool(critical), linear, no_root))
    return fits


def adjustable_set(critical, base_curve: PvCurve) -> tuple[int, ...]:
    tripped = {e.subject for e in base_curve.events if e.kind in (RG_TRIP, HOLD)}
    return tuple(sorted(set(critical) | tripped))


# -- step 3 ------------------------------------------------------------------

def enumerate_masks(case: GridCase, adjustable) -> list[np.ndarray]:
    """All non-empty blocking masks over the adjustable RGs."""
    idx = [case.rg_index(i) for i in adjustable]
    masks = []
    for bits in itertools.product((0, 1), repeat=len(idx)):
        if not any(bits):
            continue
        m = np.zeros(case.n_rg, dtype=int)
        m[idx] = bits
        masks.append(m)
    return sorted(masks, key=lambda m: tuple(m))


def delta_status(mask, base_status, held) -> np.ndarray:
    """Status change from the base nose configuration to the aimed one.

    A blocked RG that tripped on the base curve comes back (+1); an unblocked
    RG that was only held online to reach the nose is assumed lost (-1).
    """
    mask = np.asarray(mask, bool)
    base_status = np.asarray(base_status, int)
    held = np.asarray(held, bool)
    dz = np.zeros(len(mask), dtype=int)
    dz[mask & (base_status == 0)] = 1
    dz[~mask & held] = -1
    return dz


def screen(masks, sens: LmSensitivity, base_lm: float, base_status, held,
           config: PipelineConfig) -> list[CandidateSolution]:
    out = []
    for m in masks:
        dz = delta_status(m, base_status, held)
        est = float(base_lm + sens.a @ dz)
        out.append(CandidateSolution(np.asarray(m, int), dz, est, est >= config.lambda_limit))
    return out


# -- step 4 ------------------------------------------------------------------

def lvrt_reduction(case: GridCase, v_rg: np.ndarray, online) -> np.ndarray:
    """Threshold reductions ``max(c - V, 0)`` at online RGs, zero elsewhere."""
    dc = np.maximum(case.c_lvrt() - np.asarray(v_rg, float), 0.0)
    return np.where(np.asarray(online, bool), dc, 0.0)


def _flip_order(base_curve: PvCurve, changed: list[int]) -> list[int]:
    ids = base_curve.case.rg_ids
    order = [e.subject for e in base_curve.events if e.kind in (RG_TRIP, HOLD)]
    pos = {rid: n for n, rid in enumerate(order)}
    return sorted(changed, key=lambda j: (pos.get(ids[j], len(order)), ids[j]))


def _walk_statuses(case: GridCase, base_curve: PvCurve, start: SystemState, aimed: np.ndarray,
                   lam: float) -> SystemState | None:
    """Scenario 1: flip one status at a time at fixed lam, warm-starting each solve."""
    status = np.asarray(start.rg_status, int).copy()
    state = start
    changed = [j for j in range(case.n_rg) if status[j] != aimed[j]]
    for j in _flip_order(base_curve, changed):
        status[j] = aimed[j]
        rep = solve(case, lam, status, state, damped=True)
        if not rep.converged:
            return None
        state = rep.state
    return state


def _homotopy(case: GridCase, base_curve: PvCurve, snb: SnbInfo, dz: np.ndarray,
              gain: float) -> SystemState | None:
    """Scenario 2: ramp statuses continuously at the nose load scale."""
    lam = snb.lambda_star
    z0 = snb.state.rg_status.astype(float)
    mu, step = 0.0, 1.0 / HOMOTOPY_STEPS
    state = None
    while mu < 1.0 - 1e-12:
        nxt = min(1.0, mu + step)
        if state is None:
            # leave the fold on its upper side: the base curve a little below the nose
            guess = state_at_lambda(base_curve, max(lam - nxt * max(gain, 0.0), base_curve.points[0].lam))
            guess = guess.with_(q_flags=snb.state.q_flags)
        else:
            guess = state
        rep = solve(case, lam, z0 + nxt * dz, guess, damped=True)
        if rep.converged:
            mu, state = nxt, rep.state
        else:
            step *= 0.5
            if step < HOMOTOPY_MIN_FRACTION - 1e-15:
                return None
    return state.with_(rg_status=np.round(state.rg_status).astype(int))


def _tangent_extrapolate(case: GridCase, state: SystemState, lam_target: float) -> np.ndarray:
    """Bus voltages moved along dx/dlam from ``state`` to ``lam_target``."""
    net = network(case)
    J = net.jacobian(state)
    dx = np.linalg.solve(J, -net.d_lambda(state.q_flags))
    _, pq = net.layout(state.q_flags)
    npvpq = net.n - 1
    v = state.v.copy()
    v[pq] += dx[npvpq:] * (lam_target - state.lam)
    return v


def estimate_adjustments(case: GridCase, base_curve: PvCurve, snb: SnbInfo, sens: LmSensitivity,
                         feasible: list[CandidateSolution], config: PipelineConfig) -> int:
    """Fill ``adjustment_estimate`` on each feasible candidate. Returns the scenario."""
    lam_lim = config.lambda_limit
    base_status = base_curve.final_status
    rg_k = case.rg_bus_indices()
    scenario = 1 if base_curve.load_margin >= lam_lim else 2
    start = state_at_lambda(base_curve, lam_lim) if scenario == 1 else None
    for cand in feasible:
        aimed = base_status + cand.delta_status
        if scenario == 1:
            end = _walk_statuses(case, base_curve, start, aimed, lam_lim)
            v = None if end is None else end.v
        else:
            gain = float(sens.a @ cand.delta_status)
            middle = _homotopy(case, base_curve, snb, cand.delta_status.astype(float), gain)
            v = None if middle is None else _tangent_extrapolate(case, middle, lam_lim)
        if v is None:
            cand.estimate_failed = True
            continue
        cand.v_estimate = v[rg_k]
        cand.adjustment_estimate = lvrt_reduction(case, v[rg_k], cand.mask)
    return scenario


# -- step 5 ------------------------------------------------------------------

def rank_key(sum_adj: float, cand: CandidateSolution) -> tuple:
    return (round(sum_adj, TIE_DECIMALS), cand.blocked, cand.key())


def actual_outcome(case: GridCase, curve: PvCurve, lambda_limit: float) -> tuple[bool, np.ndarray]:
    """Feasibility at ``lambda_limit`` and the reductions read off a traced curve."""
    if curve.load_margin < lambda_limit:
        return False, np.zeros(case.n_rg)
    s = state_at_lambda(curve, lambda_limit)
    return True, lvrt_reduction(case, s.v[case.rg_bus_indices()], s.rg_status == 1)


def run_traces(case: GridCase, masks, config: TraceConfig, jobs: int = 1) -> list[PvCurve]:
    masks = [np.asarray(m, int) for m in masks]
    if jobs <= 1 or len(masks) <= 1:
        return [trace(case, m, config) for m in masks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(trace, [case] * len(masks), masks, [config] * len(masks)))


def evaluate_top_m(case: GridCase, ranked: list[CandidateSolution], config: PipelineConfig):
    chosen = ranked[: config.m]
    curves = run_traces(case, [c.mask for c in chosen], config.trace, config.jobs)
    for cand, curve in zip(chosen, curves):
        ok, dc = actual_outcome(case, curve, config.lambda_limit)
        cand.lm_actual = curve.load_margin
        cand.terminal_actual = curve.terminal
        cand.feasible_actual = ok
        cand.adjustment_actual = dc
    good = [c for c in chosen if c.feasible_actual]
    best = min(good, key=lambda c: rank_key(c.sum_actual, c)) if good else None
    return chosen, best


def run_pipeline(case: GridCase, config: PipelineConfig) -> PipelineResult:
    base = trace(case, None, config.trace, hold_on_collapse=True)
    result = PipelineResult(config=config, base_curve=base, force_blocked=base.held)
    ids = case.rg_ids
    c_orig = case.c_lvrt()

    # a held RG marks where the unblocked system would have collapsed
    plain_lm = min((e.lam for e in base.events if e.kind == HOLD), default=base.load_margin)
    if plain_lm >= config.lambda_limit:
        empty = np.zeros(case.n_rg, dtype=int)
        result.best = CandidateSolution(
            empty, empty.copy(), plain_lm, True, np.zeros(case.n_rg), None, False,
            plain_lm, np.zeros(case.n_rg), True, COLLAPSE if base.held else base.terminal)
        result.new_settings = {i: float(c) for i, c in zip(ids, c_orig)}
        result.message = "base load margin already meets the limit; no adjustment needed"
        return result
    if base.terminal != SNB:
        result.message = "base trace did not reach a nose"
        return result

    fits = identify_critical(case, base, config)
    result.critical_fits = fits
    result.critical_set = tuple(f.rg_id for f in fits if f.critical)
    result.adjustable = adjustable_set(result.critical_set, base)
    if not result.adjustable:
        result.message = "no RG is critical or tripped; LVRT adjustment cannot help"
        return result

    result.snb = snb_info(case, base)
    result.sensitivity = lm_sensitivity(case, result.snb)
    held = np.isin(ids, base.held)
    masks = enumerate_masks(case, result.adjustable)
    result.candidates = screen(masks, result.sensitivity, base.load_margin, base.final_status, held, config)
    feasible = result.feasible
    if not feasible:
        result.message = "no candidate passes the sensitivity screen"
        return result

    result.scenario = estimate_adjustments(case, base, result.snb, result.sensitivity, feasible, config)
    ranked = sorted((c for c in feasible if not c.estimate_failed),
                    key=lambda c: rank_key(c.sum_estimate, c))
    result.evaluated, result.best = evaluate_top_m(case, ranked, config)
    result.cpflow_calls = 1 + len(result.evaluated)
    if result.best is None:
        result.message = "all evaluated candidates are infeasible; increase m"
        return result
    result.new_settings = {i: float(c - d) for i, c, d in zip(ids, c_orig, result.best.adjustment_actual)}
    result.message = "ok"
    return result
