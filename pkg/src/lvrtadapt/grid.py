"""Network data model, case file I/O and bus admittance assembly.

All quantities are per-unit on ``base_mva``. Total demand at bus ``k`` for a
load scale ``lam`` is ``base_load + growth * lam``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import IO, Iterable

import numpy as np

BUS_KINDS = ("slack", "pv", "pq")


class CaseError(ValueError):
    """Raised for malformed or invalid case data."""


class CaseParseError(CaseError):
    pass


class CaseValidationError(CaseError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_load_p: float = 0.0
    base_load_q: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    v_setpoint: float | None = None


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 1.0


@dataclass(frozen=True)
class SyncGenerator:
    bus: int
    p_output: float
    q_min: float
    q_max: float
    v_setpoint: float


@dataclass(frozen=True)
class RgUnit:
    id: int
    bus: int
    p_output: float
    c_lvrt_original: float


@dataclass(frozen=True)
class GrowthEntry:
    bus: int
    p: float
    q: float


@dataclass(frozen=True)
class GridCase:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[SyncGenerator, ...]
    rg_units: tuple[RgUnit, ...]
    growth: tuple[GrowthEntry, ...]
    base_mva: float = 100.0
    name: str = ""
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "rg_units", tuple(sorted(self.rg_units, key=lambda u: u.id)))
        object.__setattr__(self, "growth", tuple(self.growth))
        object.__setattr__(self, "_index", {b.id: i for i, b in enumerate(self.buses)})

    # -- convenience -----------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_rg(self) -> int:
        return len(self.rg_units)

    def bus_index(self, bus_id: int) -> int:
        return self._index[bus_id]

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def rg_ids(self) -> list[int]:
        return [u.id for u in self.rg_units]

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.kind == "slack")

    def rg_index(self, rg_id: int) -> int:
        for i, u in enumerate(self.rg_units):
            if u.id == rg_id:
                return i
        raise KeyError(f"no RG with id {rg_id}")

    def rg_by_bus(self, bus_id: int) -> RgUnit:
        for u in self.rg_units:
            if u.bus == bus_id:
                return u
        raise KeyError(f"no RG on bus {bus_id}")

    def base_load(self) -> tuple[np.ndarray, np.ndarray]:
        p = np.array([b.base_load_p for b in self.buses], dtype=float)
        q = np.array([b.base_load_q for b in self.buses], dtype=float)
        return p, q

    def growth_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-bus load increments (P, Q) per unit of load scale."""
        gp = np.zeros(self.n_bus)
        gq = np.zeros(self.n_bus)
        for g in self.growth:
            k = self.bus_index(g.bus)
            gp[k] += g.p
            gq[k] += g.q
        return gp, gq

    def rg_injection_matrix(self) -> np.ndarray:
        """``n_bus x n_rg`` matrix of active injections per unit status."""
        m = np.zeros((self.n_bus, self.n_rg))
        for j, u in enumerate(self.rg_units):
            m[self.bus_index(u.bus), j] = u.p_output
        return m

    def c_lvrt(self) -> np.ndarray:
        return np.array([u.c_lvrt_original for u in self.rg_units])

    def rg_bus_indices(self) -> np.ndarray:
        return np.array([self.bus_index(u.bus) for u in self.rg_units], dtype=int)

    def replace(self, **changes) -> "GridCase":
        data = dict(
            buses=self.buses,
            branches=self.branches,
            generators=self.generators,
            rg_units=self.rg_units,
            growth=self.growth,
            base_mva=self.base_mva,
            name=self.name,
        )
        data.update(changes)
        return GridCase(**data)

    def with_rg_settings(self, settings: dict[int, float]) -> "GridCase":
        """Copy of the case with ``c_lvrt_original`` replaced per RG id."""
        units = [
            RgUnit(u.id, u.bus, u.p_output, float(settings.get(u.id, u.c_lvrt_original)))
            for u in self.rg_units
        ]
        return self.replace(rg_units=tuple(units))

    def without_rg(self, rg_id: int) -> "GridCase":
        return self.replace(rg_units=tuple(u for u in self.rg_units if u.id != rg_id))

    def with_extra_injection(self, bus_id: int, p: float) -> "GridCase":
        """Copy with a constant extra active injection ``p`` at a bus."""
        buses = tuple(
            Bus(b.id, b.kind, b.base_load_p - p, b.base_load_q, b.shunt_g, b.shunt_b, b.v_setpoint)
            if b.id == bus_id else b
            for b in self.buses
        )
        return self.replace(buses=buses)

    def scaled_growth(self, factor: float) -> "GridCase":
        growth = tuple(GrowthEntry(g.bus, g.p * factor, g.q * factor) for g in self.growth)
        return self.replace(growth=growth)


def validate(case: GridCase) -> None:
    """Check all case invariants, raising :class:`CaseValidationError`."""
    problems: list[str] = []
    seen: set[int] = set()
    for b in case.buses:
        if b.id in seen:
            problems.append(f"bus {b.id}: duplicated bus id")
        seen.add(b.id)
        if b.kind not in BUS_KINDS:
            problems.append(f"bus {b.id}: unknown kind {b.kind!r}")
        if not (np.isfinite(b.base_load_p) and np.isfinite(b.base_load_q)):
            problems.append(f"bus {b.id}: non-finite base load")
        if b.kind in ("slack", "pv"):
            if b.v_setpoint is None or not b.v_setpoint > 0:
                problems.append(f"bus {b.id}: {b.kind} bus needs v_setpoint > 0")
        elif b.v_setpoint is not None and not b.v_setpoint > 0:
            problems.append(f"bus {b.id}: v_setpoint must be > 0")
    slack = [b.id for b in case.buses if b.kind == "slack"]
    if len(slack) != 1:
        problems.append(f"case must have exactly one slack bus, found {len(slack)} ({slack})")

    for n, br in enumerate(case.branches):
        tag = f"branch {n} ({br.from_bus}-{br.to_bus})"
        if br.from_bus not in seen or br.to_bus not in seen:
            problems.append(f"{tag}: endpoint bus does not exist")
        if br.from_bus == br.to_bus:
            problems.append(f"{tag}: endpoints must differ")
        if br.r == 0 and br.x == 0:
            problems.append(f"{tag}: zero impedance")
        if not br.tap_ratio > 0:
            problems.append(f"{tag}: tap_ratio must be > 0")

    gen_buses: set[int] = set()
    for g in case.generators:
        if g.bus not in seen:
            problems.append(f"generator at bus {g.bus}: bus does not exist")
        if g.bus in gen_buses:
            problems.append(f"generator at bus {g.bus}: more than one generator per bus")
        gen_buses.add(g.bus)
        if g.q_min > g.q_max:
            problems.append(f"generator at bus {g.bus}: q_min > q_max")
        if not g.v_setpoint > 0:
            problems.append(f"generator at bus {g.bus}: v_setpoint must be > 0")
    for b in case.buses:
        if b.kind == "pv" and b.id not in gen_buses:
            problems.append(f"bus {b.id}: pv bus without a generator")

    rg_ids: set[int] = set()
    for u in case.rg_units:
        if u.id in rg_ids:
            problems.append(f"rg {u.id}: duplicated RG id")
        rg_ids.add(u.id)
        if u.bus not in seen:
            problems.append(f"rg {u.id}: bus {u.bus} does not exist")
        if not u.p_output >= 0:
            problems.append(f"rg {u.id}: p_output must be >= 0")
        if not 0 <= u.c_lvrt_original < 1.1:
            problems.append(f"rg {u.id}: c_lvrt_original must lie in [0, 1.1)")

    load_buses = {b.id for b in case.buses if b.base_load_p != 0 or b.base_load_q != 0}
    growth_buses = [g.bus for g in case.growth]
    if len(set(growth_buses)) != len(growth_buses):
        problems.append("growth: duplicated bus entry")
    if set(growth_buses) != load_buses:
        problems.append(
            f"growth: needs exactly one entry per load bus {sorted(load_buses)}, got {sorted(growth_buses)}"
        )
    if not any(g.p != 0 or g.q != 0 for g in case.growth):
        problems.append("growth: at least one nonzero entry required")
    if not case.base_mva > 0:
        problems.append("base_mva must be > 0")

    if not problems and not _connected(case):
        problems.append("network graph is not connected")
    if problems:
        raise CaseValidationError("; ".join(problems))


def _connected(case: GridCase) -> bool:
    adj: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for br in case.branches:
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    start = case.buses[0].id
    stack, seen = [start], {start}
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(adj)


def build_admittance(case: GridCase) -> np.ndarray:
    """Dense complex bus admittance matrix (pi branch model, tap on the from side)."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = case.bus_index(br.from_bus), case.bus_index(br.to_bus)
        y = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_charging
        a = br.tap_ratio
        Y[f, f] += (y + bc) / (a * a)
        Y[t, t] += y + bc
        Y[f, t] -= y / a
        Y[t, f] -= y / a
    for k, b in enumerate(case.buses):
        Y[k, k] += complex(b.shunt_g, b.shunt_b)
    return Y


# -- case file I/O ---------------------------------------------------------

_SECTIONS = ("buses", "branches", "generators", "rg_units", "growth", "base_mva")


def case_to_dict(case: GridCase) -> dict:
    out: dict = {}
    if case.name:
        out["name"] = case.name
    out["base_mva"] = case.base_mva
    out["buses"] = [asdict(b) for b in case.buses]
    out["branches"] = [asdict(b) for b in case.branches]
    out["generators"] = [asdict(g) for g in case.generators]
    out["rg_units"] = [asdict(u) for u in case.rg_units]
    out["growth"] = [asdict(g) for g in case.growth]
    return out


def emit_case(case: GridCase) -> str:
    return json.dumps(case_to_dict(case), indent=2) + "\n"


def _build(cls, rows, section: str, floats: Iterable[str]):
    if not isinstance(rows, list):
        raise CaseParseError(f"section {section!r} must be a list")
    items = []
    for n, row in enumerate(rows):
        if not isinstance(row, dict):
            raise CaseParseError(f"{section}[{n}]: expected an object")
        try:
            kwargs = dict(row)
            for key in floats:
                if key in kwargs and kwargs[key] is not None:
                    kwargs[key] = float(kwargs[key])
            items.append(cls(**kwargs))
        except (TypeError, ValueError) as exc:
            raise CaseParseError(f"{section}[{n}]: {exc}") from None
    return tuple(items)


def case_from_dict(data: dict) -> GridCase:
    if not isinstance(data, dict):
        raise CaseParseError("case document must be an object")
    missing = [s for s in _SECTIONS if s not in data]
    if missing:
        raise CaseParseError(f"missing sections: {', '.join(missing)}")
    unknown = sorted(set(data) - set(_SECTIONS) - {"name"})
    if unknown:
        raise CaseParseError(f"unknown sections: {', '.join(unknown)}")
    case = GridCase(
        buses=_build(Bus, data["buses"], "buses",
                     ("base_load_p", "base_load_q", "shunt_g", "shunt_b", "v_setpoint")),
        branches=_build(Branch, data["branches"], "branches", ("r", "x", "b_charging", "tap_ratio")),
        generators=_build(SyncGenerator, data["generators"], "generators",
                          ("p_output", "q_min", "q_max", "v_setpoint")),
        rg_units=_build(RgUnit, data["rg_units"], "rg_units", ("p_output", "c_lvrt_original")),
        growth=_build(GrowthEntry, data["growth"], "growth", ("p", "q")),
        base_mva=float(data["base_mva"]),
        name=str(data.get("name", "")),
    )
    validate(case)
    return case


def load_case(source: str | bytes | IO) -> GridCase:
    """Parse and validate a case document (text, bytes or a readable stream)."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        data = json.loads(source)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"malformed case text: {exc}") from None
    return case_from_dict(data)


def load_case_file(path) -> GridCase:
    with open(path, "rb") as fh:
        return load_case(fh)


def bundled_case_text() -> str:
    return resources.files("lvrtadapt.data").joinpath("wscc9_rg.json").read_text()


def bundled_case() -> GridCase:
    """Modified WSCC 9-bus case with six trip-prone RGs."""
    return load_case(bundled_case_text())
