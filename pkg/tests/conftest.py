import math

import numpy as np
import pytest

from lvrtadapt.grid import bundled_case, case_from_dict


def two_bus_dict(x=0.1, p0=0.5, q0=0.1, rg_p=0.0, c=0.0, b_charging=0.0, growth=None):
    """Slack bus 1 feeding a load bus 2 through a lossless reactance."""
    gp, gq = growth if growth is not None else (p0, q0)
    d = {
        "name": "two_bus",
        "base_mva": 100.0,
        "buses": [
            {"id": 1, "kind": "slack", "base_load_p": 0.0, "base_load_q": 0.0, "shunt_g": 0.0,
             "shunt_b": 0.0, "v_setpoint": 1.0},
            {"id": 2, "kind": "pq", "base_load_p": p0, "base_load_q": q0, "shunt_g": 0.0,
             "shunt_b": 0.0, "v_setpoint": None},
        ],
        "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.0, "x": x, "b_charging": b_charging,
                      "tap_ratio": 1.0}],
        "generators": [{"bus": 1, "p_output": 0.0, "q_min": -99.0, "q_max": 99.0, "v_setpoint": 1.0}],
        "rg_units": [],
        "growth": [{"bus": 2, "p": gp, "q": gq}],
    }
    if rg_p:
        d["rg_units"].append({"id": 1, "bus": 2, "p_output": rg_p, "c_lvrt_original": c})
    return d


def two_bus(**kw):
    return case_from_dict(two_bus_dict(**kw))


def two_bus_voltage(p, q, x):
    """Upper-branch receiving-end voltage for a unit source behind reactance x."""
    a = 1.0 - 2.0 * q * x
    disc = a * a - 4.0 * x * x * (p * p + q * q)
    return math.sqrt((a + math.sqrt(disc)) / 2.0)


def two_bus_nose(x, p0, q0, gp, gq, rg_p=0.0):
    """Largest lam with a real solution for load (p0 + gp lam - rg_p, q0 + gq lam)."""
    # discriminant (1 - 2Qx)^2 - 4x^2 (P^2 + Q^2) = 0 is quadratic in lam
    P0, Q0 = p0 - rg_p, q0
    A = 4 * x * x * (gq * gq) - 4 * x * x * (gp * gp + gq * gq)
    B = -4 * x * gq + 8 * x * x * Q0 * gq - 8 * x * x * (P0 * gp + Q0 * gq)
    C = (1 - 2 * Q0 * x) ** 2 - 4 * x * x * (P0 * P0 + Q0 * Q0)
    roots = np.roots([A, B, C])
    return float(max(r.real for r in roots if abs(r.imag) < 1e-12))


@pytest.fixture(scope="session")
def case9():
    return bundled_case()


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
