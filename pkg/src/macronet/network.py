"""Road-network topology, physical parameters, grid construction and validation.

A network is a directed graph of roads glued together by typed junctions.
Every road starts at exactly one junction (where it appears in the ``out``
list) and ends at exactly one junction (``in`` list); origins and
destinations act as the virtual boundary attachments. Class count is global:
every road carries one (max speed, max density) pair per vehicle class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .diagram import Greenshields


class JunctionKind(Enum):
    LINK11 = "link11"
    MERGE = "merge"
    DIVERGE_FIFO = "diverge_fifo"
    DIVERGE_NONFIFO = "diverge_nonfifo"
    ORIGIN = "origin"
    DESTINATION = "destination"


@dataclass(frozen=True)
class ClassParams:
    """Per-class free-flow speed and jam density on one road."""

    v_max: float
    r_max: float

    def __post_init__(self) -> None:
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.r_max <= 0:
            raise ValueError("r_max must be positive")


@dataclass(frozen=True)
class Road:
    """One directed road segment discretised into ``cells`` uniform cells."""

    id: str
    length: float
    cells: int
    per_class: tuple[ClassParams, ...]

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise ValueError(f"road {self.id}: length must be positive")
        if self.cells < 2:
            raise ValueError(f"road {self.id}: needs at least 2 cells")
        object.__setattr__(self, "per_class", tuple(self.per_class))

    @property
    def dx(self) -> float:
        return self.length / self.cells

    def diagram(self, class_idx: int, v_max: Optional[float] = None) -> Greenshields:
        p = self.per_class[class_idx]
        return Greenshields(V=p.v_max if v_max is None else v_max, R=p.r_max)


@dataclass(frozen=True)
class InflowProfile:
    """Piecewise-constant inflow: ``values[i]`` applies for t <= until[i], 0 after."""

    until: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.until) != len(self.values):
            raise ValueError("until/values length mismatch")
        if any(v < 0 for v in self.values):
            raise ValueError("inflow values must be non-negative")
        if list(self.until) != sorted(self.until):
            raise ValueError("segment end times must be increasing")

    def at(self, t: float) -> float:
        for end, val in zip(self.until, self.values):
            if t <= end:
                return val
        return 0.0

    @staticmethod
    def constant(value: float, horizon: float = math.inf) -> "InflowProfile":
        return InflowProfile(until=(horizon,), values=(value,))


@dataclass(frozen=True)
class BoundarySpec:
    """Inflow profiles per origin junction, outflow caps per destination junction.

    ``inflows[junction_id]`` is one :class:`InflowProfile` per class;
    ``outflow_caps[junction_id]`` one non-negative flux cap per class.
    """

    inflows: dict[str, tuple[InflowProfile, ...]] = field(default_factory=dict)
    outflow_caps: dict[str, tuple[float, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class Junction:
    id: str
    kind: JunctionKind
    incoming: tuple[str, ...]
    outgoing: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "incoming", tuple(self.incoming))
        object.__setattr__(self, "outgoing", tuple(self.outgoing))


_ARITY = {
    JunctionKind.LINK11: (lambda n, m: n == 1 and m == 1, "1 incoming and 1 outgoing"),
    JunctionKind.MERGE: (lambda n, m: n >= 2 and m == 1, ">=2 incoming and 1 outgoing"),
    JunctionKind.DIVERGE_FIFO: (lambda n, m: n == 1 and m >= 2, "1 incoming and >=2 outgoing"),
    JunctionKind.DIVERGE_NONFIFO: (lambda n, m: n == 1 and m >= 2, "1 incoming and >=2 outgoing"),
    JunctionKind.ORIGIN: (lambda n, m: n == 0 and m == 1, "0 incoming and 1 outgoing"),
    JunctionKind.DESTINATION: (lambda n, m: n == 1 and m == 0, "1 incoming and 0 outgoing"),
}


class NetworkValidationError(ValueError):
    """Raised with the complete list of validation violations."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class Network:
    """Validated road network: roads, junctions, boundary data, class count."""

    roads: tuple[Road, ...]
    junctions: tuple[Junction, ...]
    boundary: BoundarySpec
    class_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "roads", tuple(self.roads))
        object.__setattr__(self, "junctions", tuple(self.junctions))

    # -- index helpers -----------------------------------------------------

    def road(self, road_id: str) -> Road:
        for r in self.roads:
            if r.id == road_id:
                return r
        raise KeyError(road_id)

    @property
    def origin_roads(self) -> tuple[str, ...]:
        """Roads attached to an origin (the buffered entry links)."""
        return tuple(j.outgoing[0] for j in self.junctions
                     if j.kind is JunctionKind.ORIGIN)

    @property
    def total_cells(self) -> int:
        return sum(r.cells for r in self.roads)

    @property
    def state_size(self) -> int:
        """Cells plus one buffer slot per origin road (the per-class state size)."""
        return self.total_cells + len(self.origin_roads)


def validation_errors(network: Network) -> list[str]:
    """Collect every well-formedness violation (empty list means valid)."""
    errors: list[str] = []
    if not network.roads:
        errors.append("no roads")
    if network.class_count < 1:
        errors.append("class count must be >= 1")

    seen_ids: set[str] = set()
    for road in network.roads:
        if road.id in seen_ids:
            errors.append(f"duplicate road id {road.id!r}")
        seen_ids.add(road.id)
        if len(road.per_class) != network.class_count:
            errors.append(f"road {road.id}: expected {network.class_count} class"
                          f" parameter sets, got {len(road.per_class)}")

    if network.roads:
        dx0 = network.roads[0].dx
        for road in network.roads[1:]:
            if not math.isclose(road.dx, dx0, rel_tol=1e-12):
                errors.append(f"road {road.id}: cell size {road.dx} differs from"
                              f" {network.roads[0].id}'s {dx0} (grid must be uniform)")

    consumed: dict[str, str] = {}
    produced: dict[str, str] = {}
    seen_jids: set[str] = set()
    for junc in network.junctions:
        if junc.id in seen_jids:
            errors.append(f"duplicate junction id {junc.id!r}")
        seen_jids.add(junc.id)
        ok, want = _ARITY[junc.kind]
        if not ok(len(junc.incoming), len(junc.outgoing)):
            errors.append(f"junction {junc.id} ({junc.kind.value}): expects {want},"
                          f" got {len(junc.incoming)}/{len(junc.outgoing)}")
        for rid in junc.incoming:
            if rid not in seen_ids:
                errors.append(f"junction {junc.id}: unknown road {rid!r}")
            elif rid in consumed:
                errors.append(f"road {rid} multiply consumed (junctions"
                              f" {consumed[rid]} and {junc.id})")
            else:
                consumed[rid] = junc.id
        for rid in junc.outgoing:
            if rid not in seen_ids:
                errors.append(f"junction {junc.id}: unknown road {rid!r}")
            elif rid in produced:
                errors.append(f"road {rid} multiply produced (junctions"
                              f" {produced[rid]} and {junc.id})")
            else:
                produced[rid] = junc.id

    for road in network.roads:
        if road.id not in consumed:
            errors.append(f"dangling road {road.id}: not incoming to any junction")
        if road.id not in produced:
            errors.append(f"dangling road {road.id}: not outgoing of any junction")

    origins = [j for j in network.junctions if j.kind is JunctionKind.ORIGIN]
    destinations = [j for j in network.junctions if j.kind is JunctionKind.DESTINATION]
    if network.roads and not origins:
        errors.append("no origin junction")
    if network.roads and not destinations:
        errors.append("no destination junction")

    for junc in origins:
        profiles = network.boundary.inflows.get(junc.id)
        if profiles is None:
            errors.append(f"origin {junc.id}: missing inflow profiles")
        elif len(profiles) != network.class_count:
            errors.append(f"origin {junc.id}: expected {network.class_count} inflow"
                          f" profiles, got {len(profiles)}")
    for junc in destinations:
        caps = network.boundary.outflow_caps.get(junc.id)
        if caps is None:
            errors.append(f"destination {junc.id}: missing outflow caps")
        elif len(caps) != network.class_count:
            errors.append(f"destination {junc.id}: expected {network.class_count}"
                          f" outflow caps, got {len(caps)}")
        elif any(c < 0 for c in caps):
            errors.append(f"destination {junc.id}: negative outflow cap")

    # Reachability: every road must lie on some origin -> destination path.
    if not errors and network.roads:
        downstream = {j.id: j for j in network.junctions}
        road_source = {rid: jid for rid, jid in
                       ((rid, j.id) for j in network.junctions for rid in j.outgoing)}
        road_sink = {rid: jid for rid, jid in
                     ((rid, j.id) for j in network.junctions for rid in j.incoming)}

        fwd: set[str] = set()
        stack = [j.outgoing[0] for j in origins]
        while stack:
            rid = stack.pop()
            if rid in fwd:
                continue
            fwd.add(rid)
            stack.extend(downstream[road_sink[rid]].outgoing)
        bwd: set[str] = set()
        stack = [j.incoming[0] for j in destinations]
        while stack:
            rid = stack.pop()
            if rid in bwd:
                continue
            bwd.add(rid)
            stack.extend(downstream[road_source[rid]].incoming)
        for road in network.roads:
            if road.id not in fwd:
                errors.append(f"road {road.id} unreachable from any origin")
            elif road.id not in bwd:
                errors.append(f"road {road.id} cannot reach a destination"
                              " (unreachable destination)")

    return errors


def validate(network: Network) -> Network:
    """Return the network unchanged if well-formed, else raise with all violations."""
    errors = validation_errors(network)
    if errors:
        raise NetworkValidationError(errors)
    return network


@dataclass(frozen=True)
class GridSpec:
    """Space/time discretisation: uniform cell size, CFL-bounded time step."""

    dx: float
    dt: float
    t_final: float
    steps: int

    def __post_init__(self) -> None:
        if self.dx <= 0 or self.dt <= 0 or self.t_final <= 0 or self.steps < 1:
            raise ValueError("grid parameters must be positive")
        if not math.isclose(self.steps * self.dt, self.t_final, rel_tol=1e-9):
            raise ValueError("steps * dt must equal t_final")

    @property
    def lam(self) -> float:
        """Courant ratio dt/dx."""
        return self.dt / self.dx


def cfl_dt(network: Network, dx: float, safety: float = 1.0) -> float:
    """Largest stable time step: safety * dx / max wave speed over all roads/classes."""
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    speed = max(road.diagram(c).max_wave_speed()
                for road in network.roads
                for c in range(network.class_count))
    return safety * dx / speed


def make_grid(network: Network, t_final: float, safety: float = 1.0) -> GridSpec:
    """Build a grid hitting ``t_final`` exactly with a CFL-satisfying step.

    The CFL-limited step is shrunk to the largest value for which
    ``t_final / dt`` is an integer.
    """
    dx = network.roads[0].dx
    dt_max = cfl_dt(network, dx, safety)
    steps = max(1, math.ceil(t_final / dt_max - 1e-12))
    return GridSpec(dx=dx, dt=t_final / steps, t_final=t_final, steps=steps)
