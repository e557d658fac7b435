"""Newton-Raphson power flow for a fixed load scale and RG status vector.

The residual is ``f(x, lam, z) = S_calc(x) - S_spec(lam, z)`` where the
specified injection at bus ``k`` is generation minus ``base_load + growth*lam``
plus the active output of every online RG on that bus. RGs are constant
active power, zero reactive.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .grid import GridCase, build_admittance

FREE, AT_MAX, AT_MIN = "free", "at_max", "at_min"

TOL = 1e-8
MAX_ITER = 30
_BLOWUP = 1e10
_FLAG_EPS = 1e-9


@dataclass(frozen=True)
class SystemState:
    v: np.ndarray
    theta: np.ndarray
    lam: float
    rg_status: np.ndarray
    q_flags: tuple[str, ...]

    def with_(self, **changes) -> "SystemState":
        return replace(self, **changes)

    def same_as(self, other: "SystemState") -> bool:
        return (
            np.array_equal(self.v, other.v)
            and np.array_equal(self.theta, other.theta)
            and self.lam == other.lam
            and np.array_equal(self.rg_status, other.rg_status)
            and self.q_flags == other.q_flags
        )


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    final_mismatch: float
    state: SystemState
    history: list[float] = field(default_factory=list)


class Network:
    """Precomputed arrays for one case. Immutable once built."""

    def __init__(self, case: GridCase):
        self.case = case
        self.Y = build_admittance(case)
        self.n = case.n_bus
        self.slack = case.slack_index
        self.load_p, self.load_q = case.base_load()
        self.grow_p, self.grow_q = case.growth_vectors()
        self.rg_inj = case.rg_injection_matrix()
        self.rg_bus = case.rg_bus_indices()
        self.gen_bus = np.array([case.bus_index(g.bus) for g in case.generators], dtype=int)
        self.gen_p = np.zeros(self.n)
        self.v_set = np.ones(self.n)
        for b in case.buses:
            if b.v_setpoint is not None:
                self.v_set[case.bus_index(b.id)] = b.v_setpoint
        for g in case.generators:
            k = case.bus_index(g.bus)
            self.gen_p[k] += g.p_output
            self.v_set[k] = g.v_setpoint
        self.q_min = np.array([g.q_min for g in case.generators])
        self.q_max = np.array([g.q_max for g in case.generators])
        self.kind = [b.kind for b in case.buses]
        # a generator sitting on the slack or a pq bus never regulates
        self.gen_regulates = np.array([self.kind[k] == "pv" for k in self.gen_bus], dtype=bool)

    def layout(self, q_flags: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays (angle unknowns, magnitude unknowns) for a flag set."""
        pv = set(k for k, kd in enumerate(self.kind) if kd == "pv")
        for g, flag in enumerate(q_flags):
            if flag != FREE:
                pv.discard(self.gen_bus[g])
        pvpq = np.array([k for k in range(self.n) if k != self.slack], dtype=int)
        pq = np.array([k for k in range(self.n) if k != self.slack and k not in pv], dtype=int)
        return pvpq, pq

    def injections_spec(self, lam: float, rg_status, q_flags) -> tuple[np.ndarray, np.ndarray]:
        p = self.gen_p - self.load_p - self.grow_p * lam + self.rg_inj @ np.asarray(rg_status, float)
        q = -self.load_q - self.grow_q * lam
        for g, flag in enumerate(q_flags):
            if flag == AT_MAX:
                q[self.gen_bus[g]] += self.q_max[g]
            elif flag == AT_MIN:
                q[self.gen_bus[g]] += self.q_min[g]
        return p, q

    def power(self, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
        V = v * np.exp(1j * theta)
        return V * np.conj(self.Y @ V)

    def bus_mismatch(self, state: SystemState) -> tuple[np.ndarray, np.ndarray]:
        S = self.power(state.v, state.theta)
        p, q = self.injections_spec(state.lam, state.rg_status, state.q_flags)
        return S.real - p, S.imag - q

    def residual(self, state: SystemState) -> np.ndarray:
        pvpq, pq = self.layout(state.q_flags)
        dp, dq = self.bus_mismatch(state)
        return np.concatenate([dp[pvpq], dq[pq]])

    def jacobian(self, state: SystemState) -> np.ndarray:
        pvpq, pq = self.layout(state.q_flags)
        V = state.v * np.exp(1j * state.theta)
        I = self.Y @ V
        Vn = V / np.abs(V)
        dS_dVm = np.diag(V) @ np.conj(self.Y @ np.diag(Vn)) + np.diag(np.conj(I) * Vn)
        dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - self.Y @ np.diag(V))
        return np.block([
            [dS_dVa.real[np.ix_(pvpq, pvpq)], dS_dVm.real[np.ix_(pvpq, pq)]],
            [dS_dVa.imag[np.ix_(pq, pvpq)], dS_dVm.imag[np.ix_(pq, pq)]],
        ])

    def d_lambda(self, q_flags) -> np.ndarray:
        """Partial derivative of the residual with respect to the load scale."""
        pvpq, pq = self.layout(q_flags)
        return np.concatenate([self.grow_p[pvpq], self.grow_q[pq]])

    def d_status(self, q_flags) -> np.ndarray:
        """Partial derivative of the residual w.r.t. each RG status (columns)."""
        pvpq, pq = self.layout(q_flags)
        return np.vstack([-self.rg_inj[pvpq, :], np.zeros((len(pq), self.rg_inj.shape[1]))])

    def pack(self, state: SystemState) -> np.ndarray:
        pvpq, pq = self.layout(state.q_flags)
        return np.concatenate([state.theta[pvpq], state.v[pq]])

    def unpack(self, x: np.ndarray, template: SystemState, lam: float | None = None) -> SystemState:
        pvpq, pq = self.layout(template.q_flags)
        theta = template.theta.copy()
        v = template.v.copy()
        theta[pvpq] = x[: len(pvpq)]
        v[pq] = x[len(pvpq):]
        return template.with_(v=v, theta=theta, lam=template.lam if lam is None else float(lam))

    def gen_q(self, state: SystemState) -> np.ndarray:
        """Reactive output of each synchronous generator at a state."""
        S = self.power(state.v, state.theta)
        qload = self.load_q + self.grow_q * state.lam
        return S.imag[self.gen_bus] + qload[self.gen_bus]


@lru_cache(maxsize=64)
def network(case: GridCase) -> Network:
    return Network(case)


def as_status(rg_status) -> np.ndarray:
    """Copy of a status vector; integer unless fractional values are given."""
    z = np.asarray(rg_status)
    return z.astype(float if z.dtype.kind == "f" and np.any(z != np.round(z)) else int)


def flat_state(case: GridCase, lam: float = 0.0, rg_status=None) -> SystemState:
    net = network(case)
    v = np.ones(case.n_bus)
    for k, kd in enumerate(net.kind):
        if kd in ("slack", "pv"):
            v[k] = net.v_set[k]
    status = np.ones(case.n_rg, dtype=int) if rg_status is None else as_status(rg_status)
    return SystemState(v, np.zeros(case.n_bus), float(lam), status, tuple(FREE for _ in case.generators))


def mismatch(case: GridCase, state: SystemState) -> np.ndarray:
    """Active/reactive balance residual over the unknown-bearing equations."""
    return network(case).residual(state)


def jacobian(case: GridCase, state: SystemState) -> np.ndarray:
    return network(case).jacobian(state)


def newton(net: Network, state: SystemState, tol: float = TOL, max_iter: int = MAX_ITER,
           damped: bool = False) -> SolveReport:
    """Plain Newton iterations for a fixed flag configuration."""
    x = net.pack(state)
    f = net.residual(state)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    history = [norm]
    it = 0
    while norm > tol:
        if it >= max_iter or not np.isfinite(norm) or norm > _BLOWUP:
            return SolveReport(False, it, norm, state, history)
        try:
            dx = np.linalg.solve(net.jacobian(state), -f)
        except np.linalg.LinAlgError:
            return SolveReport(False, it, norm, state, history)
        if not np.all(np.isfinite(dx)):
            return SolveReport(False, it, norm, state, history)
        alpha = 1.0
        while True:
            trial = net.unpack(x + alpha * dx, state)
            f_trial = net.residual(trial)
            n_trial = float(np.max(np.abs(f_trial)))
            if not damped or (np.isfinite(n_trial) and n_trial < norm) or alpha < 1e-3:
                break
            alpha *= 0.5
        x = x + alpha * dx
        state, f, norm = trial, f_trial, n_trial
        it += 1
        history.append(norm)
        if np.any(state.v <= 0):
            return SolveReport(False, it, norm, state, history)
    return SolveReport(True, it, norm, state, history)


def update_q_flags(net: Network, state: SystemState) -> tuple[str, ...]:
    """PV->PQ switching at violated limits, PQ->PV back-switching when released."""
    qg = net.gen_q(state)
    flags = list(state.q_flags)
    for g, flag in enumerate(flags):
        if not net.gen_regulates[g]:
            continue
        k = net.gen_bus[g]
        if flag == FREE:
            if qg[g] > net.q_max[g] + _FLAG_EPS:
                flags[g] = AT_MAX
            elif qg[g] < net.q_min[g] - _FLAG_EPS:
                flags[g] = AT_MIN
        elif flag == AT_MAX and state.v[k] > net.v_set[k] + _FLAG_EPS:
            flags[g] = FREE
        elif flag == AT_MIN and state.v[k] < net.v_set[k] - _FLAG_EPS:
            flags[g] = FREE
    return tuple(flags)


def _release(net: Network, state: SystemState, old: tuple[str, ...], new: tuple[str, ...]) -> SystemState:
    # a bus returning to voltage control restarts at its setpoint
    v = state.v.copy()
    for g, (a, b) in enumerate(zip(old, new)):
        if a != FREE and b == FREE:
            v[net.gen_bus[g]] = net.v_set[net.gen_bus[g]]
    return state.with_(v=v, q_flags=new)


def solve(case: GridCase, lam: float, rg_status, x0: SystemState | None = None,
          tol: float = TOL, max_iter: int = MAX_ITER, damped: bool = False,
          q_limits: bool = True) -> SolveReport:
    """Solve the power flow at load scale ``lam`` with the given RG statuses.

    Divergence is reported through ``converged=False``; it never raises.
    """
    net = network(case)
    if x0 is None:
        x0 = flat_state(case, lam, rg_status)
    state = x0.with_(lam=float(lam), rg_status=as_status(rg_status))
    total = 0
    history: list[float] = []
    for _ in range(2 * len(case.generators) + 1):
        rep = newton(net, state, tol, max_iter, damped)
        total += rep.iterations
        history.extend(rep.history)
        if not rep.converged:
            return SolveReport(False, total, rep.final_mismatch, rep.state, history)
        state = rep.state
        if not q_limits:
            break
        flags = update_q_flags(net, state)
        if flags == state.q_flags:
            break
        state = _release(net, state, state.q_flags, flags)
    else:
        return SolveReport(False, total, rep.final_mismatch, state, history)
    return SolveReport(True, total, rep.final_mismatch, state, history)
