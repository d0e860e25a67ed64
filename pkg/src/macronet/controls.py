"""Time-dependent control schedules: routing splits, merge priorities, speed limits.

The horizon ``[0, t_final)`` is divided into ``n`` equal subintervals and
every control is piecewise constant on them. Two-way diverges and merges are
parameterised by a single scalar per (class, subinterval) -- the share of the
first listed road, with the complement implied -- which removes the
sum-to-one equality constraint from the optimisation. Wider junctions keep
the full stochastic vector and rely on simplex projection.

``free_vector`` / ``with_free_vector`` define the canonical flat layout used
by gradients, finite differences and the optimiser: free groups in schedule
order, within a group class-major, then subinterval, then vector component.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .network import JunctionKind, Network

SPLIT = "split"
PRIORITY = "priority"
SPEED = "speed"


def _stochastic(values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if np.any(values < -1e-12):
        raise ValueError(f"{what}: negative component")
    sums = values.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-9):
        raise ValueError(f"{what}: rows must sum to 1 (got {sums})")
    return values


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant controls over ``n`` subintervals of the horizon.

    ``splits[j]`` has shape (classes, n, M_out) for diverge junction ``j``,
    ``priorities[j]`` shape (classes, n, M_in) for merge ``j``, and
    ``speed_limits[r]`` shape (classes, n) for road ``r`` (absolute speeds).
    The ``free_*`` tuples name the groups exposed to the optimiser.
    """

    n: int
    class_count: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    priorities: dict[str, np.ndarray] = field(default_factory=dict)
    speed_limits: dict[str, np.ndarray] = field(default_factory=dict)
    speed_caps: dict[str, np.ndarray] = field(default_factory=dict)
    free_splits: tuple[str, ...] = ()
    free_priorities: tuple[str, ...] = ()
    free_speeds: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("need at least one control subinterval")
        for jid, v in self.splits.items():
            arr = _stochastic(v, f"splits[{jid}]")
            if arr.shape[:2] != (self.class_count, self.n):
                raise ValueError(f"splits[{jid}]: expected shape"
                                 f" ({self.class_count}, {self.n}, M)")
            self.splits[jid] = arr
        for jid, v in self.priorities.items():
            arr = _stochastic(v, f"priorities[{jid}]")
            if arr.shape[:2] != (self.class_count, self.n):
                raise ValueError(f"priorities[{jid}]: expected shape"
                                 f" ({self.class_count}, {self.n}, M)")
            self.priorities[jid] = arr
        for rid, v in self.speed_limits.items():
            arr = np.asarray(v, dtype=float)
            if arr.shape != (self.class_count, self.n):
                raise ValueError(f"speed_limits[{rid}]: expected shape"
                                 f" ({self.class_count}, {self.n})")
            if np.any(arr < 0):
                raise ValueError(f"speed_limits[{rid}]: negative speed")
            self.speed_limits[rid] = arr
        for name in self.free_splits:
            if name not in self.splits:
                raise ValueError(f"free split {name!r} has no values")
        for name in self.free_priorities:
            if name not in self.priorities:
                raise ValueError(f"free priority {name!r} has no values")
        for name in self.free_speeds:
            if name not in self.speed_limits:
                raise ValueError(f"free speed limit {name!r} has no values")

    # -- time lookup ---------------------------------------------------------

    def subinterval(self, step: int, total_steps: int) -> int:
        """Subinterval active at step ``step`` of ``total_steps`` (clamped)."""
        return min(step * self.n // total_steps, self.n - 1)

    def split_at(self, junction_id: str, sub: int) -> np.ndarray:
        return self.splits[junction_id][:, sub, :]

    def priority_at(self, junction_id: str, sub: int) -> np.ndarray:
        return self.priorities[junction_id][:, sub, :]

    def speed_at(self, road_id: str, sub: int) -> Optional[np.ndarray]:
        v = self.speed_limits.get(road_id)
        return None if v is None else v[:, sub]

    # -- flat free-parameter vector -------------------------------------------

    def _groups(self) -> list[tuple[str, str, np.ndarray]]:
        groups = [(SPLIT, jid, self.splits[jid]) for jid in self.free_splits]
        groups += [(PRIORITY, jid, self.priorities[jid]) for jid in self.free_priorities]
        groups += [(SPEED, rid, self.speed_limits[rid]) for rid in self.free_speeds]
        return groups

    def _group_width(self, kind: str, values: np.ndarray) -> int:
        """Free scalars per (class, subinterval) slot of one group."""
        if kind == SPEED:
            return 1
        m = values.shape[-1]
        return 1 if m == 2 else m

    def free_size(self) -> int:
        return sum(self.class_count * self.n * self._group_width(kind, v)
                   for kind, _, v in self._groups())

    def free_vector(self) -> np.ndarray:
        out: list[np.ndarray] = []
        for kind, _, values in self._groups():
            if kind == SPEED:
                out.append(values.reshape(-1))
            elif values.shape[-1] == 2:
                out.append(values[:, :, 0].reshape(-1))
            else:
                out.append(values.reshape(-1))
        return np.concatenate(out) if out else np.zeros(0)

    def with_free_vector(self, u: np.ndarray) -> "ControlSchedule":
        u = np.asarray(u, dtype=float)
        if u.shape != (self.free_size(),):
            raise ValueError(f"expected control vector of length {self.free_size()}")
        splits = dict(self.splits)
        priorities = dict(self.priorities)
        speeds = dict(self.speed_limits)
        pos = 0
        for kind, ident, values in self._groups():
            if kind == SPEED:
                width = self.class_count * self.n
                speeds[ident] = u[pos:pos + width].reshape(self.class_count, self.n)
                pos += width
            elif values.shape[-1] == 2:
                width = self.class_count * self.n
                first = u[pos:pos + width].reshape(self.class_count, self.n)
                new = np.stack([first, 1.0 - first], axis=-1)
                (splits if kind == SPLIT else priorities)[ident] = new
                pos += width
            else:
                width = values.size
                new = u[pos:pos + width].reshape(values.shape)
                (splits if kind == SPLIT else priorities)[ident] = new
                pos += width
        return replace(self, splits=splits, priorities=priorities, speed_limits=speeds)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Componentwise box bounds of the free vector."""
        lo: list[np.ndarray] = []
        hi: list[np.ndarray] = []
        for kind, ident, values in self._groups():
            if kind == SPEED:
                width = self.class_count * self.n
                caps = self.speed_caps.get(ident)
                if caps is None:
                    caps = values.max(axis=1)
                top = np.repeat(np.asarray(caps, dtype=float), self.n)
                lo.append(np.zeros(width))
                hi.append(top)
            else:
                width = self.class_count * self.n * self._group_width(kind, values)
                lo.append(np.zeros(width))
                hi.append(np.ones(width))
        if not lo:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(lo), np.concatenate(hi)

    def simplex_blocks(self) -> list[tuple[int, int]]:
        """(offset, M) spans of the free vector that must stay on the simplex."""
        blocks: list[tuple[int, int]] = []
        pos = 0
        for kind, _, values in self._groups():
            width = self._group_width(kind, values)
            span = self.class_count * self.n * width
            if kind != SPEED and width > 1:
                for start in range(pos, pos + span, width):
                    blocks.append((start, width))
            pos += span
        return blocks

    def labels(self) -> list[tuple[str, str, int, int, int]]:
        """(kind, id, class index, subinterval, component) per free scalar."""
        out: list[tuple[str, str, int, int, int]] = []
        for kind, ident, values in self._groups():
            width = self._group_width(kind, values)
            for c in range(self.class_count):
                for j in range(self.n):
                    for m in range(width):
                        out.append((kind, ident, c, j, m))
        return out

    def columns(self, kind: str, ident: str, class_idx: int, sub: int,
                component: int) -> list[tuple[int, float]]:
        """Free-vector columns (index, chain weight) hit by one raw control partial.

        For a two-way split/priority the complement is implied, so the raw
        partial with respect to component 1 lands on the same scalar with
        weight -1. Fixed groups return no columns.
        """
        template = self.column_template(kind, ident, class_idx, component)
        if template is None:
            return []
        col0, stride, weight = template
        return [(col0 + sub * stride, weight)]

    def column_template(self, kind: str, ident: str, class_idx: int,
                        component: int) -> Optional[tuple[int, int, float]]:
        """(col0, stride, weight): the column at subinterval j is col0 + j*stride."""
        pos = 0
        for gkind, gident, values in self._groups():
            width = self._group_width(gkind, values)
            span = self.class_count * self.n * width
            if gkind == kind and gident == ident:
                if gkind != SPEED and width == 1:
                    col0 = pos + class_idx * self.n
                    return (col0, 1, 1.0 if component == 0 else -1.0)
                col0 = pos + class_idx * self.n * width + component
                return (col0, width, 1.0)
            pos += span
        return None


def default_schedule(network: Network, n: int = 1,
                     splits: Optional[dict[str, np.ndarray]] = None,
                     priorities: Optional[dict[str, np.ndarray]] = None,
                     speed_limits: Optional[dict[str, np.ndarray]] = None,
                     free_splits: Optional[Iterable[str]] = None,
                     free_priorities: Iterable[str] = (),
                     free_speeds: Iterable[str] = ()) -> ControlSchedule:
    """Schedule with one entry per diverge/merge, broadcast over subintervals.

    ``splits``/``priorities`` map junction id to an (classes, M) array (or an
    (classes, n, M) array, taken as is). Junctions without an entry default
    to the uniform distribution. By default every diverge's split is free.
    """
    N = network.class_count
    split_vals: dict[str, np.ndarray] = {}
    prio_vals: dict[str, np.ndarray] = {}
    diverge_ids: list[str] = []
    for junc in network.junctions:
        if junc.kind in (JunctionKind.DIVERGE_FIFO, JunctionKind.DIVERGE_NONFIFO):
            m = len(junc.outgoing)
            base = (splits or {}).get(junc.id)
            if base is None:
                base = np.full((N, m), 1.0 / m)
            split_vals[junc.id] = _broadcast_subintervals(base, N, n, m)
            diverge_ids.append(junc.id)
        elif junc.kind is JunctionKind.MERGE:
            m = len(junc.incoming)
            base = (priorities or {}).get(junc.id)
            if base is None:
                base = np.full((N, m), 1.0 / m)
            prio_vals[junc.id] = _broadcast_subintervals(base, N, n, m)
    speed_vals: dict[str, np.ndarray] = {}
    speed_caps: dict[str, np.ndarray] = {}
    for rid, v in (speed_limits or {}).items():
        road = network.road(rid)
        arr = np.asarray(v, dtype=float)
        if arr.shape == (N,):
            arr = np.repeat(arr[:, None], n, axis=1)
        speed_vals[rid] = arr
        speed_caps[rid] = np.array([p.v_max for p in road.per_class])
    if free_splits is None:
        free_splits = tuple(diverge_ids)
    return ControlSchedule(
        n=n, class_count=N, splits=split_vals, priorities=prio_vals,
        speed_limits=speed_vals, speed_caps=speed_caps,
        free_splits=tuple(free_splits), free_priorities=tuple(free_priorities),
        free_speeds=tuple(free_speeds))


def _broadcast_subintervals(base: np.ndarray, N: int, n: int, m: int) -> np.ndarray:
    arr = np.asarray(base, dtype=float)
    if arr.shape == (N, m):
        arr = np.repeat(arr[:, None, :], n, axis=1)
    if arr.shape != (N, n, m):
        raise ValueError(f"control values: expected ({N}, {m}) or ({N}, {n}, {m}),"
                         f" got {arr.shape}")
    return arr
