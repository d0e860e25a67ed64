"""Forward-in-time Godunov simulation over the full network.

The per-class state is the concatenation of all road cells plus one queue
slot per origin road. ``NetworkLayout`` freezes the index maps (cell slices,
interface gather indices, junction attachment points) so the per-step kernel
is a handful of vectorised operations over all cells plus a short loop over
junctions.

A simulation records, per step, every interface and junction flux together
with the active min/max branch of each flux site; the backward sensitivity
pass replays those branches instead of re-deciding them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .controls import ControlSchedule
from .junctions import (FIFO_DEMAND, InflowBranch, MergeBranch, VACUUM_REL,
                        buffer_update, destination_kernel, fifo_kernel,
                        godunov_kernel, merge_kernel, nonfifo_kernel,
                        origin_kernel)
from .network import GridSpec, Junction, JunctionKind, Network, validate


class InvariantViolation(RuntimeError):
    """A state left the admissible region: CFL violation or a flux bug."""


@dataclass
class State:
    """Cell densities (classes x cells) and origin queues (classes x origins)."""

    densities: np.ndarray
    buffers: np.ndarray

    def copy(self) -> "State":
        return State(self.densities.copy(), self.buffers.copy())


@dataclass
class _JunctionMeta:
    junction: Junction
    in_last: np.ndarray    # global cell index of each incoming road's last cell
    out_first: np.ndarray  # global cell index of each outgoing road's first cell
    in_edge: np.ndarray    # edge slot written by the incoming-side flux
    out_edge: np.ndarray   # edge slot written by the outgoing-side flux
    buffer_col: int = -1   # origin junctions: column into the buffers array


class NetworkLayout:
    """Frozen index maps and per-cell parameter arrays for one network."""

    def __init__(self, network: Network):
        self.network = validate(network)
        N = network.class_count
        self.N = N
        self.road_ids = [r.id for r in network.roads]
        self.road_index = {rid: i for i, rid in enumerate(self.road_ids)}

        self.cell_slice: dict[str, slice] = {}
        pos = 0
        for road in network.roads:
            self.cell_slice[road.id] = slice(pos, pos + road.cells)
            pos += road.cells
        self.C = pos

        self.origin_roads = list(network.origin_roads)
        self.buffer_col = {rid: i for i, rid in enumerate(self.origin_roads)}
        self.O = len(self.origin_roads)
        self.M = self.C + self.O

        # state-slot layout: per road, buffer slot (if any) then its cells
        self.cell_slot = np.empty(self.C, dtype=np.int64)
        self.buffer_slot: dict[str, int] = {}
        slot = 0
        for road in network.roads:
            if road.id in self.buffer_col:
                self.buffer_slot[road.id] = slot
                slot += 1
            sl = self.cell_slice[road.id]
            self.cell_slot[sl] = np.arange(slot, slot + road.cells)
            slot += road.cells

        # physical parameters per (class, cell)
        self.V_base = np.empty((N, self.C))
        self.R_all = np.empty((N, self.C))
        for road in network.roads:
            sl = self.cell_slice[road.id]
            for c in range(N):
                self.V_base[c, sl] = road.per_class[c].v_max
                self.R_all[c, sl] = road.per_class[c].r_max
        self.rcr_all = 0.5 * self.R_all
        self.eps_cell = VACUUM_REL * self.R_all.max(axis=0)
        self.R_cell = self.R_all.max(axis=0)

        # interface and edge indexing (one extra edge slot per road)
        road_of_cell = np.concatenate([
            np.full(r.cells, i) for i, r in enumerate(network.roads)])
        self.left_edge = np.arange(self.C) + road_of_cell
        self.edge_count = self.C + len(network.roads)
        self.edge_base = {rid: self.cell_slice[rid].start + self.road_index[rid]
                          for rid in self.road_ids}
        keep = np.ones(self.C, dtype=bool)
        for road in network.roads:
            keep[self.cell_slice[road.id].stop - 1] = False
        self.if_up = np.nonzero(keep)[0]           # upstream cell of interfaces
        self.if_dn = self.if_up + 1
        self.if_edge = self.if_up + road_of_cell[self.if_up] + 1
        self.if_slice = {}
        for road in network.roads:
            sl = self.cell_slice[road.id]
            lo = np.searchsorted(self.if_up, sl.start)
            hi = np.searchsorted(self.if_up, sl.stop - 1)
            self.if_slice[road.id] = slice(lo, hi)

        self.junctions: list[_JunctionMeta] = []
        for junc in network.junctions:
            in_last = np.array([self.cell_slice[r].stop - 1 for r in junc.incoming],
                               dtype=np.int64)
            out_first = np.array([self.cell_slice[r].start for r in junc.outgoing],
                                 dtype=np.int64)
            in_edge = np.array([self.edge_base[r] + network.road(r).cells
                                for r in junc.incoming], dtype=np.int64)
            out_edge = np.array([self.edge_base[r] for r in junc.outgoing],
                                dtype=np.int64)
            buffer_col = (self.buffer_col[junc.outgoing[0]]
                          if junc.kind is JunctionKind.ORIGIN else -1)
            self.junctions.append(_JunctionMeta(junc, in_last, out_first,
                                                in_edge, out_edge, buffer_col))

    def zero_state(self) -> State:
        return State(np.zeros((self.N, self.C)), np.zeros((self.N, self.O)))

    def effective_speeds(self, controls: ControlSchedule, sub: int) -> np.ndarray:
        """Base speeds with the subinterval's speed limits applied."""
        V = self.V_base
        if controls.speed_limits:
            V = V.copy()
            for rid in controls.speed_limits:
                V[:, self.cell_slice[rid]] = controls.speed_at(rid, sub)[:, None]
        return V

    def inflow_table(self, grid: GridSpec) -> dict[str, np.ndarray]:
        """Per-origin (steps, classes) inflow rates sampled at step start times."""
        tables = {}
        for junc in self.network.junctions:
            if junc.kind is not JunctionKind.ORIGIN:
                continue
            profiles = self.network.boundary.inflows[junc.id]
            tables[junc.id] = np.array(
                [[prof.at(nu * grid.dt) for prof in profiles]
                 for nu in range(grid.steps)])
        return tables


# -- per-step flux and branch records ---------------------------------------

@dataclass
class Link11Record:
    flux: np.ndarray      # (T, N)
    demand: np.ndarray    # (T, N) bool
    margin: np.ndarray


@dataclass
class MergeRecord:
    gamma_out: np.ndarray  # (T, M, N) per incoming road
    tags: np.ndarray       # (T, M, N) MergeBranch codes
    margin: np.ndarray


@dataclass
class FifoRecord:
    gamma_in: np.ndarray   # (T, M, N) per outgoing road
    gamma_out: np.ndarray  # (T, N)
    branch: np.ndarray     # (T, N): 0 demand, i >= 1 limiting outgoing road
    margin: np.ndarray


@dataclass
class NonFifoRecord:
    gamma_in: np.ndarray     # (T, M, N)
    demand_side: np.ndarray  # (T, M, N) bool
    margin: np.ndarray


@dataclass
class OriginRecord:
    gamma: np.ndarray            # (T, N)
    tags: np.ndarray             # (T, N) InflowBranch codes
    margin: np.ndarray
    buffer_positive: np.ndarray  # (T, N) bool
    inflow: np.ndarray           # (T, N) sampled arrival rates


@dataclass
class DestinationRecord:
    gamma: np.ndarray
    active: np.ndarray  # (T, N) bool, True when below the cap
    margin: np.ndarray


@dataclass
class Records:
    interior_flux: dict[str, np.ndarray]
    interior_demand: dict[str, np.ndarray]
    interior_margin: dict[str, np.ndarray]
    junction: dict[str, object]

    @staticmethod
    def allocate(layout: NetworkLayout, steps: int) -> "Records":
        T, N = steps, layout.N
        interior_flux, interior_demand, interior_margin = {}, {}, {}
        for road in layout.network.roads:
            nif = road.cells - 1
            interior_flux[road.id] = np.zeros((T, N, nif))
            interior_demand[road.id] = np.zeros((T, N, nif), dtype=bool)
            interior_margin[road.id] = np.zeros((T, N, nif))
        junction: dict[str, object] = {}
        for meta in layout.junctions:
            junc = meta.junction
            if junc.kind is JunctionKind.LINK11:
                junction[junc.id] = Link11Record(
                    np.zeros((T, N)), np.zeros((T, N), bool), np.zeros((T, N)))
            elif junc.kind is JunctionKind.MERGE:
                m = len(junc.incoming)
                junction[junc.id] = MergeRecord(
                    np.zeros((T, m, N)), np.zeros((T, m, N), np.int8),
                    np.zeros((T, m, N)))
            elif junc.kind is JunctionKind.DIVERGE_FIFO:
                m = len(junc.outgoing)
                junction[junc.id] = FifoRecord(
                    np.zeros((T, m, N)), np.zeros((T, N)),
                    np.zeros((T, N), np.int8), np.zeros((T, N)))
            elif junc.kind is JunctionKind.DIVERGE_NONFIFO:
                m = len(junc.outgoing)
                junction[junc.id] = NonFifoRecord(
                    np.zeros((T, m, N)), np.zeros((T, m, N), bool),
                    np.zeros((T, m, N)))
            elif junc.kind is JunctionKind.ORIGIN:
                junction[junc.id] = OriginRecord(
                    np.zeros((T, N)), np.zeros((T, N), np.int8),
                    np.zeros((T, N)), np.zeros((T, N), bool), np.zeros((T, N)))
            elif junc.kind is JunctionKind.DESTINATION:
                junction[junc.id] = DestinationRecord(
                    np.zeros((T, N)), np.zeros((T, N), bool), np.zeros((T, N)))
        return Records(interior_flux, interior_demand, interior_margin, junction)

    def tie_site_count(self, tolerance: float = 1e-6) -> int:
        """Flux sites whose competing min/max arguments nearly tie."""
        count = 0
        for margin in self.interior_margin.values():
            count += int((margin < tolerance).sum())
        for rec in self.junction.values():
            count += int((rec.margin < tolerance).sum())
        return count


@dataclass
class Trajectory:
    """States for every step plus the flux/branch records of each transition."""

    densities: np.ndarray  # (T + 1, N, C)
    buffers: np.ndarray    # (T + 1, N, O)
    records: Optional[Records]
    controls: ControlSchedule
    layout: NetworkLayout = field(repr=False)

    @property
    def steps(self) -> int:
        return self.densities.shape[0] - 1

    def state(self, nu: int) -> State:
        return State(self.densities[nu], self.buffers[nu])


def _junction_fluxes(layout: NetworkLayout, meta: _JunctionMeta, idx: int,
                     sub: int, controls: ControlSchedule,
                     inflow_now: dict[str, np.ndarray], dt: float,
                     buffers: np.ndarray, D: np.ndarray, S: np.ndarray,
                     k: np.ndarray, Veff: np.ndarray, edges: np.ndarray,
                     rec: Optional[Records], buffers_next: np.ndarray) -> None:
    junc = meta.junction
    kind = junc.kind
    if kind is JunctionKind.LINK11:
        flux, demand, margin = godunov_kernel(
            k[:, meta.in_last[0]], D[:, meta.in_last[0]], S[:, meta.out_first[0]])
        edges[:, meta.in_edge[0]] = flux
        edges[:, meta.out_edge[0]] = flux
        if rec is not None:
            r = rec.junction[junc.id]
            r.flux[idx], r.demand[idx], r.margin[idx] = flux, demand, margin
    elif kind is JunctionKind.MERGE:
        gamma_out, tags, margin = merge_kernel(
            k[:, meta.in_last].T, D[:, meta.in_last].T, S[:, meta.out_first[0]],
            controls.priority_at(junc.id, sub))
        edges[np.arange(layout.N)[:, None], meta.in_edge[None, :]] = gamma_out.T
        edges[:, meta.out_edge[0]] = gamma_out.sum(axis=0)
        if rec is not None:
            r = rec.junction[junc.id]
            r.gamma_out[idx], r.tags[idx], r.margin[idx] = gamma_out, tags, margin
    elif kind is JunctionKind.DIVERGE_FIFO:
        gamma_out, gamma_in, branch, margin = fifo_kernel(
            k[:, meta.in_last[0]], D[:, meta.in_last[0]], S[:, meta.out_first].T,
            controls.split_at(junc.id, sub))
        total = gamma_in.sum(axis=0)  # same atoms as the downstream gains
        edges[:, meta.in_edge[0]] = total
        edges[np.arange(layout.N)[:, None], meta.out_edge[None, :]] = gamma_in.T
        if rec is not None:
            r = rec.junction[junc.id]
            r.gamma_in[idx], r.gamma_out[idx] = gamma_in, total
            r.branch[idx], r.margin[idx] = branch, margin
    elif kind is JunctionKind.DIVERGE_NONFIFO:
        gamma_in, demand_side, margin = nonfifo_kernel(
            k[:, meta.in_last[0]], D[:, meta.in_last[0]], S[:, meta.out_first].T,
            controls.split_at(junc.id, sub))
        edges[:, meta.in_edge[0]] = gamma_in.sum(axis=0)
        edges[np.arange(layout.N)[:, None], meta.out_edge[None, :]] = gamma_in.T
        if rec is not None:
            r = rec.junction[junc.id]
            r.gamma_in[idx], r.demand_side[idx], r.margin[idx] = \
                gamma_in, demand_side, margin
    elif kind is JunctionKind.ORIGIN:
        first = meta.out_first[0]
        F_in = inflow_now[junc.id]
        Q_crit = Veff[:, first] * layout.R_all[:, first] * 0.25
        lvec = buffers[:, meta.buffer_col]
        gamma, tags, margin = origin_kernel(lvec, F_in, S[:, first], Q_crit, dt)
        edges[:, meta.out_edge[0]] = gamma
        new_l, positive = buffer_update(lvec, F_in, gamma, dt)
        buffers_next[:, meta.buffer_col] = new_l
        if rec is not None:
            r = rec.junction[junc.id]
            r.gamma[idx], r.tags[idx], r.margin[idx] = gamma, tags, margin
            r.buffer_positive[idx], r.inflow[idx] = positive, F_in
    elif kind is JunctionKind.DESTINATION:
        last = meta.in_last[0]
        caps = np.asarray(layout.network.boundary.outflow_caps[junc.id])
        gamma, active, margin = destination_kernel(k[:, last], D[:, last], caps)
        edges[:, meta.in_edge[0]] = gamma
        if rec is not None:
            r = rec.junction[junc.id]
            r.gamma[idx], r.active[idx], r.margin[idx] = gamma, active, margin


def _check_region(layout: NetworkLayout, rho: np.ndarray, nu: int,
                  slack: float) -> None:
    if rho.min(initial=0.0) < -slack:
        raise InvariantViolation(f"negative density after step {nu}")
    if np.any(rho > layout.R_all + slack):
        raise InvariantViolation(f"class density above its maximum after step {nu}")
    if np.any(rho.sum(axis=0) > layout.R_cell + slack):
        raise InvariantViolation(f"total density above the jam density after step {nu}")


def _advance(layout: NetworkLayout, grid: GridSpec, controls: ControlSchedule,
             inflows: dict[str, np.ndarray], nu: int, rho: np.ndarray,
             buffers: np.ndarray, Veff: np.ndarray, rec: Optional[Records],
             rec_index: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One conservative update from step ``nu`` to ``nu + 1``."""
    sub = controls.subinterval(nu, grid.steps)
    r = rho.sum(axis=0)
    m = np.minimum(r, layout.rcr_all)
    D = Veff * m * (1.0 - m / layout.R_all)
    mm = np.maximum(r, layout.rcr_all)
    S = Veff * mm * (1.0 - mm / layout.R_all)
    k = np.zeros_like(rho)
    np.divide(rho, r, out=k, where=r >= layout.eps_cell)

    edges = np.zeros((layout.N, layout.edge_count))
    flux, demand, margin = godunov_kernel(
        k[:, layout.if_up], D[:, layout.if_up], S[:, layout.if_dn])
    edges[:, layout.if_edge] = flux
    if rec is not None:
        for rid, isl in layout.if_slice.items():
            rec.interior_flux[rid][rec_index] = flux[:, isl]
            rec.interior_demand[rid][rec_index] = demand[:, isl]
            rec.interior_margin[rid][rec_index] = margin[:, isl]

    buffers_next = buffers.copy()
    for meta in layout.junctions:
        _junction_fluxes(layout, meta, rec_index, sub, controls,
                         {jid: table[nu] for jid, table in inflows.items()},
                         grid.dt, buffers, D, S, k, Veff, edges, rec,
                         buffers_next)

    rho_next = rho - grid.lam * (edges[:, layout.left_edge + 1]
                                 - edges[:, layout.left_edge])
    return rho_next, buffers_next


def step(state: State, network: Network, grid: GridSpec,
         controls: ControlSchedule, step_index: int = 0,
         layout: Optional[NetworkLayout] = None,
         record: bool = True) -> tuple[State, Optional[Records]]:
    """Advance one step; records (if requested) hold that transition at index 0."""
    layout = layout or NetworkLayout(network)
    inflows = layout.inflow_table(grid)
    rec = Records.allocate(layout, 1) if record else None
    Veff = layout.effective_speeds(
        controls, controls.subinterval(step_index, grid.steps))
    rho, buf = _advance(layout, grid, controls, inflows, step_index,
                        state.densities, state.buffers, Veff, rec, rec_index=0)
    _check_region(layout, rho, step_index, 1e-9 * layout.R_all.max())
    return State(rho, buf), rec


def simulate(network: Network, grid: GridSpec, controls: ControlSchedule,
             initial: Optional[State] = None, record: bool = True,
             layout: Optional[NetworkLayout] = None,
             check_invariants: bool = True) -> Trajectory:
    """Run the full horizon and return all states plus flux/branch records."""
    layout = layout or NetworkLayout(network)
    T, N = grid.steps, layout.N
    state = initial.copy() if initial is not None else layout.zero_state()
    densities = np.empty((T + 1, N, layout.C))
    buffers = np.empty((T + 1, N, layout.O))
    densities[0], buffers[0] = state.densities, state.buffers
    rec = Records.allocate(layout, T) if record else None
    inflows = layout.inflow_table(grid)
    slack = 1e-9 * layout.R_all.max()

    sub_speeds: dict[int, np.ndarray] = {}
    rho, buf = state.densities, state.buffers
    for nu in range(T):
        sub = controls.subinterval(nu, T)
        if sub not in sub_speeds:
            sub_speeds[sub] = layout.effective_speeds(controls, sub)
        rho, buf = _advance(layout, grid, controls, inflows, nu, rho, buf,
                            sub_speeds[sub], rec, rec_index=nu)
        if check_invariants:
            _check_region(layout, rho, nu, slack)
        densities[nu + 1], buffers[nu + 1] = rho, buf
    return Trajectory(densities, buffers, rec, controls, layout)


def simulate_objectives(network: Network, grid: GridSpec,
                        controls: ControlSchedule,
                        initial: Optional[State] = None,
                        layout: Optional[NetworkLayout] = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Per-class (travel time, travel distance) without storing the trajectory.

    Both sums include every state index from 0 to T, matching the discrete
    functionals evaluated on a stored trajectory.
    """
    layout = layout or NetworkLayout(network)
    T = grid.steps
    state = initial.copy() if initial is not None else layout.zero_state()
    inflows = layout.inflow_table(grid)
    rho, buf = state.densities, state.buffers
    cell_sum = np.zeros(layout.N)
    buf_sum = np.zeros(layout.N)
    dist_sum = np.zeros(layout.N)
    sub_speeds: dict[int, np.ndarray] = {}
    for nu in range(T + 1):
        sub = controls.subinterval(nu, T)
        if sub not in sub_speeds:
            sub_speeds[sub] = layout.effective_speeds(controls, sub)
        Veff = sub_speeds[sub]
        r = rho.sum(axis=0)
        v = Veff * np.maximum(1.0 - r / layout.R_all, 0.0)
        cell_sum += rho.sum(axis=1)
        buf_sum += buf.sum(axis=1)
        dist_sum += (rho * v).sum(axis=1)
        if nu < T:
            rho, buf = _advance(layout, grid, controls, inflows, nu, rho, buf,
                                Veff, None)
    ttt = grid.dt * grid.dx * cell_sum + grid.dt * buf_sum
    ttd = grid.dt * grid.dx * dist_sum
    return ttt, ttd


def mass_ledger(traj: Trajectory, grid: GridSpec) -> np.ndarray:
    """Per-step, per-class mass-balance residuals (vehicles).

    Residual(nu) = mass(nu) + cumulative outflow - cumulative inflow
    - mass(0); exact conservation makes every entry vanish to roundoff.
    """
    if traj.records is None:
        raise ValueError("mass_ledger needs a recorded trajectory")
    layout = traj.layout
    T = traj.steps
    mass = grid.dx * traj.densities.sum(axis=2) + traj.buffers.sum(axis=2)
    inflow = np.zeros((T, layout.N))
    outflow = np.zeros((T, layout.N))
    for meta in layout.junctions:
        rec = traj.records.junction[meta.junction.id]
        if meta.junction.kind is JunctionKind.ORIGIN:
            inflow += rec.inflow
        elif meta.junction.kind is JunctionKind.DESTINATION:
            outflow += rec.gamma
    cum_in = np.vstack([np.zeros(layout.N), grid.dt * np.cumsum(inflow, axis=0)])
    cum_out = np.vstack([np.zeros(layout.N), grid.dt * np.cumsum(outflow, axis=0)])
    return mass + cum_out - cum_in - mass[0]
