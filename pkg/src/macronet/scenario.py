"""Scenario files: network + grid + default controls as JSON, and the bundled
seven-road benchmark network.

Scenario schema (all keys required unless noted):
  classes    vehicle class count
  roads      [{id, length, cells, per_class: [{v_max, r_max}, ...]}, ...]
  junctions  [{id, kind, in, out, ...}]  with per-kind extras:
               origin       inflow: per-class list of {until_time, value}
               destination  outflow_cap: per-class list
               merge        priorities: per-class list over incoming roads
               diverges     splits: per-class list over outgoing roads
  grid       {dx, t_final, cfl_safety}

Controls files override the scenario's split/priority/speed defaults:
  {"n": int, "splits": {junction: {class(1-based): [per-subinterval]}},
   "priorities": {...}, "speed_limits": {road: {class: [...]}}}
Two-way entries give the first road's share per subinterval; wider junctions
list full distributions. Groups named in a controls file become the free
optimisation variables; omitted groups stay at scenario defaults and fixed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .controls import ControlSchedule, default_schedule
from .network import (BoundarySpec, ClassParams, GridSpec, InflowProfile,
                      Junction, JunctionKind, Network, Road, make_grid,
                      validate)

_KIND_NAMES = {k.value: k for k in JunctionKind}


class ScenarioError(ValueError):
    """Malformed scenario or controls file."""


@dataclass
class Scenario:
    network: Network
    t_final: float
    cfl_safety: float = 1.0
    split_defaults: dict[str, np.ndarray] = field(default_factory=dict)
    priority_defaults: dict[str, np.ndarray] = field(default_factory=dict)

    def grid(self) -> GridSpec:
        return make_grid(self.network, self.t_final, self.cfl_safety)

    def controls(self, n: int = 1, free_splits: Optional[list[str]] = None,
                 free_priorities: tuple[str, ...] = (),
                 free_speeds: tuple[str, ...] = ()) -> ControlSchedule:
        return default_schedule(
            self.network, n, splits=self.split_defaults,
            priorities=self.priority_defaults, free_splits=free_splits,
            free_priorities=free_priorities, free_speeds=free_speeds)


def scenario_from_dict(data: dict) -> Scenario:
    try:
        classes = int(data["classes"])
        roads = tuple(
            Road(id=str(r["id"]), length=float(r["length"]),
                 cells=int(r["cells"]),
                 per_class=tuple(ClassParams(float(p["v_max"]), float(p["r_max"]))
                                 for p in r["per_class"]))
            for r in data["roads"])
        junctions = []
        inflows: dict[str, tuple[InflowProfile, ...]] = {}
        caps: dict[str, tuple[float, ...]] = {}
        split_defaults: dict[str, np.ndarray] = {}
        priority_defaults: dict[str, np.ndarray] = {}
        for j in data["junctions"]:
            kind = _KIND_NAMES.get(str(j["kind"]))
            if kind is None:
                raise ScenarioError(f"unknown junction kind {j['kind']!r}")
            jid = str(j["id"])
            junctions.append(Junction(
                id=jid, kind=kind,
                incoming=tuple(str(r) for r in j.get("in", ())),
                outgoing=tuple(str(r) for r in j.get("out", ()))))
            if kind is JunctionKind.ORIGIN:
                inflows[jid] = tuple(
                    InflowProfile(until=tuple(float(s["until_time"]) for s in segs),
                                  values=tuple(float(s["value"]) for s in segs))
                    for segs in j["inflow"])
            elif kind is JunctionKind.DESTINATION:
                caps[jid] = tuple(float(v) for v in j["outflow_cap"])
            elif kind is JunctionKind.MERGE and "priorities" in j:
                priority_defaults[jid] = np.asarray(j["priorities"], dtype=float)
            elif kind in (JunctionKind.DIVERGE_FIFO,
                          JunctionKind.DIVERGE_NONFIFO) and "splits" in j:
                split_defaults[jid] = np.asarray(j["splits"], dtype=float)
        grid = data["grid"]
        network = Network(roads=roads, junctions=tuple(junctions),
                          boundary=BoundarySpec(inflows, caps),
                          class_count=classes)
        dx = float(grid["dx"])
        for road in roads:
            if not math.isclose(road.dx, dx, rel_tol=1e-9):
                raise ScenarioError(
                    f"road {road.id}: length/cells = {road.dx} != grid dx {dx}")
        scenario = Scenario(network=validate(network),
                            t_final=float(grid["t_final"]),
                            cfl_safety=float(grid.get("cfl_safety", 1.0)),
                            split_defaults=split_defaults,
                            priority_defaults=priority_defaults)
        return scenario
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from exc


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON in {path}: {exc}") from exc
    return scenario_from_dict(data)


def load_controls(path: Union[str, Path], scenario: Scenario,
                  n: Optional[int] = None) -> ControlSchedule:
    """Build a schedule from a controls file; listed groups become free."""
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"controls file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"invalid JSON in {path}: {exc}") from exc
    try:
        file_n = int(data.get("n", 1))
        n = file_n if n is None else n
        if n != file_n:
            raise ScenarioError(f"controls file has n={file_n}, requested n={n}")
        N = scenario.network.class_count
        base = scenario.controls(n=n, free_splits=[])

        def expand(junction_id: str, per_class: dict, m: int) -> np.ndarray:
            arr = np.empty((N, n, m))
            for c in range(N):
                series = per_class.get(str(c + 1))
                if series is None:
                    arr[c] = base_values[junction_id][c]
                    continue
                series = np.asarray(series, dtype=float)
                if m == 2 and series.ndim == 1:
                    if series.size != n:
                        raise ScenarioError(
                            f"{junction_id}: class {c + 1} needs {n} values")
                    arr[c] = np.stack([series, 1.0 - series], axis=-1)
                else:
                    if series.shape != (n, m):
                        raise ScenarioError(
                            f"{junction_id}: class {c + 1} needs shape ({n}, {m})")
                    arr[c] = series
            return arr

        splits = dict(base.splits)
        base_values = base.splits
        free_splits = []
        for jid, per_class in (data.get("splits") or {}).items():
            if jid not in splits:
                raise ScenarioError(f"splits: {jid!r} is not a diverge junction")
            splits[jid] = expand(jid, per_class, splits[jid].shape[-1])
            free_splits.append(jid)
        priorities = dict(base.priorities)
        base_values = base.priorities
        free_priorities = []
        for jid, per_class in (data.get("priorities") or {}).items():
            if jid not in priorities:
                raise ScenarioError(f"priorities: {jid!r} is not a merge junction")
            priorities[jid] = expand(jid, per_class, priorities[jid].shape[-1])
            free_priorities.append(jid)
        speed_limits = {}
        speed_caps = {}
        free_speeds = []
        for rid, per_class in (data.get("speed_limits") or {}).items():
            road = scenario.network.road(rid)
            arr = np.empty((N, n))
            for c in range(N):
                series = per_class.get(str(c + 1))
                if series is None:
                    arr[c] = road.per_class[c].v_max
                else:
                    series = np.asarray(series, dtype=float)
                    if series.size != n:
                        raise ScenarioError(
                            f"speed_limits[{rid}]: class {c + 1} needs {n} values")
                    arr[c] = series
            speed_limits[rid] = arr
            speed_caps[rid] = np.array([p.v_max for p in road.per_class])
            free_speeds.append(rid)
        return ControlSchedule(
            n=n, class_count=N, splits=splits, priorities=priorities,
            speed_limits=speed_limits, speed_caps=speed_caps,
            free_splits=tuple(free_splits),
            free_priorities=tuple(free_priorities),
            free_speeds=tuple(free_speeds))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"malformed controls file: {exc}") from exc


# -- bundled benchmark network -------------------------------------------------

def benchmark_dict() -> dict:
    """Seven-road, two-class benchmark: one origin feeding three 15-length
    routes through two diverges and two merges into a single destination."""
    lengths = {"1": 3.0, "2": 3.0, "3": 6.0, "4": 3.0, "5": 6.0,
               "6": 3.0, "7": 3.0}
    v2 = {"1": 80.0, "2": 40.0, "3": 40.0, "4": 20.0, "5": 20.0,
          "6": 40.0, "7": 40.0}
    roads = [{"id": rid, "length": L, "cells": int(round(10 * L)),
              "per_class": [{"v_max": 80.0, "r_max": 150.0},
                            {"v_max": v2[rid], "r_max": 150.0}]}
             for rid, L in lengths.items()]
    junctions = [
        {"id": "e1", "kind": "origin", "out": ["1"],
         "inflow": [[{"until_time": 0.5, "value": 3000.0}],
                    [{"until_time": 0.5, "value": 2000.0}]]},
        {"id": "e2", "kind": "diverge_fifo", "in": ["1"], "out": ["2", "3"],
         "splits": [[0.7, 0.3], [0.4, 0.6]]},
        {"id": "e3", "kind": "diverge_fifo", "in": ["2"], "out": ["4", "5"],
         "splits": [[0.1, 0.9], [0.7, 0.3]]},
        {"id": "e4", "kind": "merge", "in": ["3", "4"], "out": ["6"],
         "priorities": [[0.5, 0.5], [0.5, 0.5]]},
        {"id": "e5", "kind": "merge", "in": ["5", "6"], "out": ["7"],
         "priorities": [[1.0 / 3.0, 2.0 / 3.0], [1.0 / 3.0, 2.0 / 3.0]]},
        {"id": "e6", "kind": "destination", "in": ["7"],
         "outflow_cap": [3000.0, 1500.0]},
    ]
    return {"classes": 2, "roads": roads, "junctions": junctions,
            "grid": {"dx": 0.1, "t_final": 1.0, "cfl_safety": 1.0}}


def benchmark_scenario() -> Scenario:
    return scenario_from_dict(benchmark_dict())


def benchmark_start_controls() -> dict:
    """The baseline routing point used by the optimisation studies."""
    return {"n": 1,
            "splits": {"e2": {"1": [0.7], "2": [0.4]},
                       "e3": {"1": [0.1], "2": [0.7]}}}


def write_bundled_files(directory: Union[str, Path]) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scenario_path = directory / "fig5.json"
    controls_path = directory / "u0.json"
    scenario_path.write_text(json.dumps(benchmark_dict(), indent=2) + "\n")
    controls_path.write_text(json.dumps(benchmark_start_controls(), indent=2)
                             + "\n")
    return scenario_path, controls_path
