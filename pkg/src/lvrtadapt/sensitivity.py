"""Load-margin sensitivity to RG connection status at the nose of a P-V curve.

At a saddle-node bifurcation the state Jacobian ``J`` has a left null vector
``w``. Pre-multiplying the linearized equilibrium condition by ``w`` removes
the state variation and leaves

    d(lam) = -(w . df/dlam)^-1 (w . df/dz) dz

so each RG gets a first-order load-margin gain per unit of status change.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cpflow import SNB, PvCurve
from .grid import GridCase
from .powerflow import SystemState, network

INVERSE_SHIFT = 1e-2
INVERSE_MAX_ITER = 50
RESIDUAL_BOUND = 1e-6


class SensitivityError(RuntimeError):
    pass


@dataclass(frozen=True)
class SnbInfo:
    state: SystemState
    left_vector: np.ndarray
    lambda_star: float
    residual: float


@dataclass(frozen=True)
class LmSensitivity:
    a: np.ndarray
    rg_ids: tuple[int, ...]

    def entry(self, rg_id: int) -> float:
        return float(self.a[self.rg_ids.index(rg_id)])


def left_null_vector(J: np.ndarray, shift: float = INVERSE_SHIFT,
                     max_iter: int = INVERSE_MAX_ITER) -> np.ndarray:
    """Inverse iteration on ``J.T`` for the eigenvector nearest zero."""
    n = J.shape[0]
    A = J.T - shift * np.eye(n)
    w = np.ones(n) / np.sqrt(n)
    for _ in range(max_iter):
        w_next = np.linalg.solve(A, w)
        w_next /= np.linalg.norm(w_next)
        if w_next @ w < 0:
            w_next = -w_next
        done = np.linalg.norm(w_next - w) < 1e-14
        w = w_next
        if done:
            break
    return w


def snb_info(case: GridCase, curve: PvCurve) -> SnbInfo:
    """Left zero eigenvector of the state Jacobian at the traced nose."""
    if curve.terminal != SNB or curve.snb_state is None:
        raise SensitivityError("curve does not end at a saddle-node bifurcation")
    net = network(case)
    state = curve.snb_state
    J = net.jacobian(state)
    w = left_null_vector(J)
    residual = float(np.linalg.norm(w @ J) / np.linalg.norm(J, 2))
    if residual > RESIDUAL_BOUND:
        raise SensitivityError(
            f"left vector residual {residual:.2e} exceeds {RESIDUAL_BOUND:.0e}; "
            "re-trace with a tighter nose localization"
        )
    if w @ net.d_lambda(state.q_flags) < 0:
        w = -w
    return SnbInfo(state=state, left_vector=w, lambda_star=curve.load_margin, residual=residual)


def lm_sensitivity(case: GridCase, snb: SnbInfo) -> LmSensitivity:
    net = network(case)
    flags = snb.state.q_flags
    denom = float(snb.left_vector @ net.d_lambda(flags))
    if abs(denom) < 1e-12:
        raise SensitivityError("growth direction is orthogonal to the left null vector")
    a = -(snb.left_vector @ net.d_status(flags)) / denom
    return LmSensitivity(a=a, rg_ids=tuple(case.rg_ids))


def estimate_lm(base_lm: float, sens: LmSensitivity, delta_status) -> float:
    dz = np.asarray(delta_status, dtype=float)
    if np.any(~np.isin(dz, (-1.0, 0.0, 1.0))):
        raise ValueError("delta_status entries must be -1, 0 or +1")
    return float(base_lm + sens.a @ dz)
