"""Backward sensitivity engine: Jacobian block assembly and the adjoint sweep.

The stacked update equations couple each state only to the previous one, so
their Jacobian is block lower triangular with identity diagonal blocks. One
backward substitution therefore yields the adjoint variable, and with it the
full cost gradient over every control at the price of roughly one extra
forward pass, independent of the number of control parameters.

All derivative branches are taken from the flux records of the forward pass:
at a kink the forward tie-break decides, which makes the result a
well-defined generalised-gradient element and keeps it consistent with the
simulated trajectory. Assembly touches only the sparsity stencil: each cell
row couples to its neighbours and junction counterparts across classes,
buffer rows to themselves and the first road cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import costs as costs_mod
from .controls import PRIORITY, SPEED, SPLIT, ControlSchedule
from .costs import Objective
from .junctions import InflowBranch, MergeBranch
from .network import GridSpec, JunctionKind, Network
from .simulation import NetworkLayout, Trajectory, simulate


def class_fraction_derivs(rho_c: float, r: float,
                          eps: float = 0.0) -> tuple[float, float]:
    """Class share k = rho/r and its own-density derivative (r - rho) / r^2.

    Below the vacuum threshold both are defined as zero, matching the
    convention that empty cells emit no flux and contribute zero rows.
    """
    if r <= eps or r == 0.0:
        return 0.0, 0.0
    return rho_c / r, (r - rho_c) / (r * r)


@dataclass
class JacobianBlocks:
    """Per-step sparse blocks in shared-pattern coordinate form.

    ``vals[t]`` holds the entries of the block coupling state ``t`` to the
    equations of step ``t + 1``. State blocks have fixed columns; control
    blocks address the column ``cols + col_stride * subinterval(t)``.
    """

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray  # (steps, entries)
    n_rows: int
    n_cols: int
    col_stride: Optional[np.ndarray] = None
    subs: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return self.vals.shape[0]

    def step_cols(self, t: int) -> np.ndarray:
        if self.col_stride is None:
            return self.cols
        return self.cols + self.col_stride * self.subs[t]

    def block(self, nu: int) -> sp.csr_matrix:
        """Materialise the sparse block of equations at step ``nu`` (1-based)."""
        if not 1 <= nu <= self.steps:
            raise IndexError(f"block index {nu} outside 1..{self.steps}")
        t = nu - 1
        return sp.coo_matrix((self.vals[t], (self.rows, self.step_cols(t))),
                             shape=(self.n_rows, self.n_cols)).tocsr()


@dataclass
class GradientReport:
    """Objective value, full control gradient, and nonsmoothness diagnostics."""

    value: float
    gradient: np.ndarray
    adjoint_norm: float
    tie_sites: int


class _Entries:
    """Accumulator for shared-pattern coordinate entries."""

    def __init__(self, steps: int):
        self.steps = steps
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []

    def add(self, row: int, col: int, vals: np.ndarray) -> None:
        self._rows.append(np.array([row], dtype=np.int64))
        self._cols.append(np.array([col], dtype=np.int64))
        self._vals.append(np.asarray(vals, dtype=float).reshape(self.steps, 1))

    def add_block(self, rows: np.ndarray, cols: np.ndarray,
                  vals: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        self._rows.append(rows)
        self._cols.append(cols)
        self._vals.append(np.asarray(vals, dtype=float).reshape(self.steps, -1))

    def concatenate(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self._rows:
            return (np.zeros(0, np.int64), np.zeros(0, np.int64),
                    np.zeros((self.steps, 0)))
        return (np.concatenate(self._rows), np.concatenate(self._cols),
                np.concatenate(self._vals, axis=1))


class _ControlEntries:
    """Accumulator for control-block entries with subinterval-shifted columns."""

    def __init__(self, steps: int, controls: ControlSchedule):
        self.steps = steps
        self.controls = controls
        self._rows: list[int] = []
        self._col0: list[int] = []
        self._stride: list[int] = []
        self._vals: list[np.ndarray] = []

    def add(self, row: int, kind: str, ident: str, class_idx: int,
            component: int, vals: np.ndarray) -> None:
        template = self.controls.column_template(kind, ident, class_idx, component)
        if template is None:
            return
        col0, stride, weight = template
        self._rows.append(row)
        self._col0.append(col0)
        self._stride.append(stride)
        self._vals.append(weight * np.asarray(vals, dtype=float))

    def build(self, n_rows: int, subs: np.ndarray) -> JacobianBlocks:
        if not self._rows:
            return JacobianBlocks(np.zeros(0, np.int64), np.zeros(0, np.int64),
                                  np.zeros((self.steps, 0)), n_rows,
                                  self.controls.free_size(),
                                  col_stride=np.zeros(0, np.int64), subs=subs)
        return JacobianBlocks(
            np.array(self._rows, dtype=np.int64),
            np.array(self._col0, dtype=np.int64),
            np.stack(self._vals, axis=1), n_rows, self.controls.free_size(),
            col_stride=np.array(self._stride, dtype=np.int64), subs=subs)


@dataclass
class _CellEnv:
    """Per-step flux ingredients at one cell (the upstream side of a site)."""

    rho: np.ndarray    # (T, N)
    r: np.ndarray      # (T,)
    k: np.ndarray      # (T, N)
    kp: np.ndarray     # (T, N) own-class derivative of the class share
    inv_r: np.ndarray  # (T,) zero below the vacuum threshold
    D: np.ndarray      # (T, N) demand of the total density per class
    Dp: np.ndarray     # (T, N) its slope in the total density
    S: np.ndarray      # (T, N)
    Sp: np.ndarray     # (T, N)
    dDdV: np.ndarray   # (T, N) demand sensitivity to the speed scale
    dSdV: np.ndarray   # (T, N)
    R: np.ndarray      # (N,)


def _subinterval_array(controls: ControlSchedule, steps: int) -> np.ndarray:
    return np.minimum(np.arange(steps) * controls.n // steps, controls.n - 1)


class _Assembler:
    def __init__(self, traj: Trajectory, grid: GridSpec):
        if traj.records is None:
            raise ValueError("trajectory was simulated without branch records")
        self.traj = traj
        self.grid = grid
        self.layout = traj.layout
        self.controls = traj.controls
        self.T = traj.steps
        self.dens = traj.densities[:self.T]
        self.bufs = traj.buffers[:self.T]
        self.subs = _subinterval_array(self.controls, self.T)
        self._envs: dict[int, _CellEnv] = {}
        self._road_of_cell = {}
        for road in self.layout.network.roads:
            sl = self.layout.cell_slice[road.id]
            for cell in range(sl.start, sl.stop):
                self._road_of_cell[cell] = road

    # -- shared ingredients --------------------------------------------------

    def _speed_table(self, rid: str, shape_tail: int = 0) -> np.ndarray:
        """(T, N) effective speed scale of one road at every step."""
        sp_arr = self.controls.speed_limits.get(rid)
        if sp_arr is not None:
            return sp_arr[:, self.subs].T
        road = self.layout.network.road(rid)
        base = np.array([p.v_max for p in road.per_class])
        return np.broadcast_to(base, (self.T, self.layout.N))

    def env(self, cell: int) -> _CellEnv:
        if cell in self._envs:
            return self._envs[cell]
        layout = self.layout
        road = self._road_of_cell[cell]
        rho = self.dens[:, :, cell]
        r = rho.sum(axis=1)
        R = layout.R_all[:, cell]
        rcr = 0.5 * R
        V = self._speed_table(road.id)
        eps = layout.eps_cell[cell]
        ok = r >= eps
        safe = np.where(ok, r, 1.0)
        k = np.where(ok[:, None], rho / safe[:, None], 0.0)
        kp = np.where(ok[:, None], (r[:, None] - rho) / (safe * safe)[:, None], 0.0)
        inv_r = np.where(ok, 1.0 / safe, 0.0)
        rb = r[:, None]
        m = np.minimum(rb, rcr)
        D = V * m * (1.0 - m / R)
        Dp = np.where(rb <= rcr, V * (1.0 - 2.0 * rb / R), 0.0)
        mm = np.maximum(rb, rcr)
        S = V * mm * (1.0 - mm / R)
        Sp = np.where(rb > rcr, V * (1.0 - 2.0 * rb / R), 0.0)
        env = _CellEnv(rho, r, k, kp, inv_r, D, Dp, S, Sp,
                       m * (1.0 - m / R), mm * (1.0 - mm / R), R)
        self._envs[cell] = env
        return env

    def _row(self, class_idx: int, slot: int) -> int:
        return class_idx * self.layout.M + slot

    def _speed_free(self, rid: str) -> bool:
        return rid in self.controls.free_speeds

    # -- state-block assembly --------------------------------------------------

    def state_blocks(self) -> JacobianBlocks:
        layout, T, lam = self.layout, self.T, self.grid.lam
        N, M = layout.N, layout.M
        out = _Entries(T)

        # previous-state identity terms: densities always, buffers only while
        # the queue expression stays strictly positive
        slots = layout.cell_slot
        rows = (np.arange(N)[:, None] * M + slots[None, :]).reshape(-1)
        out.add_block(rows, rows, np.broadcast_to(-1.0, (T, rows.size)))
        for meta in layout.junctions:
            if meta.junction.kind is not JunctionKind.ORIGIN:
                continue
            rec = self.traj.records.junction[meta.junction.id]
            bslot = layout.buffer_slot[meta.junction.outgoing[0]]
            for c in range(N):
                out.add(self._row(c, bslot), self._row(c, bslot),
                        -rec.buffer_positive[:, c].astype(float))

        self._interior_entries(out, lam)
        for meta in layout.junctions:
            kind = meta.junction.kind
            if kind is JunctionKind.LINK11:
                self._link11_entries(out, meta, lam)
            elif kind is JunctionKind.MERGE:
                self._merge_entries(out, meta, lam)
            elif kind is JunctionKind.DIVERGE_FIFO:
                self._fifo_entries(out, meta, lam)
            elif kind is JunctionKind.DIVERGE_NONFIFO:
                self._nonfifo_entries(out, meta, lam)
            elif kind is JunctionKind.ORIGIN:
                self._origin_entries(out, meta, lam)
            elif kind is JunctionKind.DESTINATION:
                self._destination_entries(out, meta, lam)

        rows, cols, vals = out.concatenate()
        return JacobianBlocks(rows, cols, vals, N * M, N * M)

    def _interior_entries(self, out: _Entries, lam: float) -> None:
        layout, T = self.layout, self.T
        N, M = layout.N, layout.M
        rec = self.traj.records
        for road in layout.network.roads:
            sl = layout.cell_slice[road.id]
            nif = road.cells - 1
            up = np.arange(sl.start, sl.stop - 1)
            dn = up + 1
            rho_up = self.dens[:, :, up]
            r_up = rho_up.sum(axis=1)
            r_dn = self.dens[:, :, dn].sum(axis=1)
            R = np.array([p.r_max for p in road.per_class])[None, :, None]
            rcr = 0.5 * R
            V = self._speed_table(road.id)[:, :, None]
            eps = layout.eps_cell[sl.start]

            ok = r_up >= eps
            safe = np.where(ok, r_up, 1.0)[:, None, :]
            k = np.where(ok[:, None, :], rho_up / safe, 0.0)
            kp = np.where(ok[:, None, :], (r_up[:, None, :] - rho_up) / safe ** 2, 0.0)
            inv_r = np.where(ok, 1.0 / np.where(ok, r_up, 1.0), 0.0)[:, None, :]

            ru = r_up[:, None, :]
            m = np.minimum(ru, rcr)
            D = V * m * (1.0 - m / R)
            Dp = np.where(ru <= rcr, V * (1.0 - 2.0 * ru / R), 0.0)
            rd = r_dn[:, None, :]
            mm = np.maximum(rd, rcr)
            S = V * mm * (1.0 - mm / R)
            Sp = np.where(rd > rcr, V * (1.0 - 2.0 * rd / R), 0.0)

            dem = rec.interior_demand[road.id]
            own = np.where(dem, kp * D + k * Dp, kp * S)
            cross = np.where(dem, k * (Dp - D * inv_r), -k * inv_r * S)
            down = np.where(dem, 0.0, k * Sp)

            eye = np.eye(N, dtype=bool)[None, :, :, None]
            val_up = np.where(eye, own[:, :, None, :], cross[:, :, None, :])
            val_dn = np.broadcast_to(down[:, :, None, :], (T, N, N, nif))

            up_slot = layout.cell_slot[up]
            dn_slot = layout.cell_slot[dn]
            c_idx = np.arange(N)[:, None, None]
            g_idx = np.arange(N)[None, :, None]
            row_up = np.broadcast_to(c_idx * M + up_slot[None, None, :],
                                     (N, N, nif))
            row_dn = np.broadcast_to(c_idx * M + dn_slot[None, None, :],
                                     (N, N, nif))
            col_up = np.broadcast_to(g_idx * M + up_slot[None, None, :],
                                     (N, N, nif))
            col_dn = np.broadcast_to(g_idx * M + dn_slot[None, None, :],
                                     (N, N, nif))

            out.add_block(row_up, col_up, lam * val_up)
            out.add_block(row_dn, col_up, -lam * val_up)
            out.add_block(row_up, col_dn, lam * val_dn)
            out.add_block(row_dn, col_dn, -lam * val_dn)

    def _link11_entries(self, out: _Entries, meta, lam: float) -> None:
        rec = self.traj.records.junction[meta.junction.id]
        layout = self.layout
        U = self.env(meta.in_last[0])
        W = self.env(meta.out_first[0])
        slotU = layout.cell_slot[meta.in_last[0]]
        slotW = layout.cell_slot[meta.out_first[0]]
        for c in range(layout.N):
            dem = rec.demand[:, c]
            rowU, rowW = self._row(c, slotU), self._row(c, slotW)
            own = np.where(dem, U.kp[:, c] * U.D[:, c] + U.k[:, c] * U.Dp[:, c],
                           U.kp[:, c] * W.S[:, c])
            cross = np.where(dem, U.k[:, c] * (U.Dp[:, c] - U.D[:, c] * U.inv_r),
                             -U.k[:, c] * U.inv_r * W.S[:, c])
            downstream = np.where(dem, 0.0, U.k[:, c] * W.Sp[:, c])
            for g in range(layout.N):
                v = own if g == c else cross
                out.add(rowU, self._row(g, slotU), lam * v)
                out.add(rowW, self._row(g, slotU), -lam * v)
                out.add(rowU, self._row(g, slotW), lam * downstream)
                out.add(rowW, self._row(g, slotW), -lam * downstream)

    def _merge_entries(self, out: _Entries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rec = self.traj.records.junction[junc.id]
        envs = [self.env(cell) for cell in meta.in_last]
        W = self.env(meta.out_first[0])
        slotW = layout.cell_slot[meta.out_first[0]]
        M_in = len(junc.incoming)
        prio = self.controls.priorities[junc.id]
        for c in range(layout.N):
            p = prio[c, self.subs, :]  # (T, M_in)
            D_all = np.stack([e.D[:, c] for e in envs], axis=1)
            rowW = self._row(c, slotW)
            for i, Ui in enumerate(envs):
                tag = rec.tags[:, i, c]
                t1 = tag == int(MergeBranch.DEMAND)
                t2 = tag == int(MergeBranch.PRIORITY)
                t3 = tag == int(MergeBranch.LEFTOVER)
                slotUi = layout.cell_slot[meta.in_last[i]]
                rowUi = self._row(c, slotUi)
                k, kp = Ui.k[:, c], Ui.kp[:, c]
                pS = p[:, i] * W.S[:, c]
                leftover = W.S[:, c] - (D_all.sum(axis=1) - D_all[:, i])
                limit = np.where(t1, Ui.D[:, c], np.where(t2, pS, leftover))
                own = np.where(t1, kp * Ui.D[:, c] + k * Ui.Dp[:, c], kp * limit)
                cross = np.where(t1, k * (Ui.Dp[:, c] - Ui.D[:, c] * Ui.inv_r),
                                 -k * Ui.inv_r * limit)
                downstream = np.where(t2, k * p[:, i] * W.Sp[:, c],
                                      np.where(t3, k * W.Sp[:, c], 0.0))
                for g in range(layout.N):
                    v = own if g == c else cross
                    out.add(rowUi, self._row(g, slotUi), lam * v)
                    out.add(rowW, self._row(g, slotUi), -lam * v)
                    out.add(rowUi, self._row(g, slotW), lam * downstream)
                    out.add(rowW, self._row(g, slotW), -lam * downstream)
                for j, Uj in enumerate(envs):
                    if j == i:
                        continue
                    other = -k * np.where(t3, Uj.Dp[:, c], 0.0)
                    slotUj = layout.cell_slot[meta.in_last[j]]
                    for g in range(layout.N):
                        out.add(rowUi, self._row(g, slotUj), lam * other)
                        out.add(rowW, self._row(g, slotUj), -lam * other)

    def _fifo_entries(self, out: _Entries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rec = self.traj.records.junction[junc.id]
        U = self.env(meta.in_last[0])
        outs = [self.env(cell) for cell in meta.out_first]
        slotU = layout.cell_slot[meta.in_last[0]]
        M_out = len(junc.outgoing)
        split = self.controls.splits[junc.id]
        for c in range(layout.N):
            alpha = split[c, self.subs, :]  # (T, M_out)
            code = rec.branch[:, c]
            k, kp = U.k[:, c], U.kp[:, c]
            rowU = self._row(c, slotU)
            case0 = code == 0
            own = np.where(case0, kp * U.D[:, c] + k * U.Dp[:, c], 0.0)
            cross = np.where(case0, k * (U.Dp[:, c] - U.D[:, c] * U.inv_r), 0.0)
            ratios = []
            for j, Wj in enumerate(outs):
                a_j = alpha[:, j]
                ratio = np.zeros(self.T)
                np.divide(Wj.S[:, c], a_j, out=ratio, where=a_j > 0)
                ratios.append(ratio)
                sel = code == j + 1
                own = own + np.where(sel, kp * ratio, 0.0)
                cross = cross + np.where(sel, -k * U.inv_r * ratio, 0.0)
            rows_dn = [self._row(c, layout.cell_slot[cell])
                       for cell in meta.out_first]
            for g in range(layout.N):
                v = own if g == c else cross
                out.add(rowU, self._row(g, slotU), lam * v)
                for i in range(M_out):
                    out.add(rows_dn[i], self._row(g, slotU),
                            -lam * alpha[:, i] * v)
            for j, Wj in enumerate(outs):
                sel = code == j + 1
                a_j = alpha[:, j]
                inv_a = np.zeros(self.T)
                np.divide(1.0, a_j, out=inv_a, where=a_j > 0)
                dWj = np.where(sel, k * inv_a * Wj.Sp[:, c], 0.0)
                slotWj = layout.cell_slot[meta.out_first[j]]
                for g in range(layout.N):
                    out.add(rowU, self._row(g, slotWj), lam * dWj)
                    for i in range(M_out):
                        out.add(rows_dn[i], self._row(g, slotWj),
                                -lam * alpha[:, i] * dWj)

    def _nonfifo_entries(self, out: _Entries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rec = self.traj.records.junction[junc.id]
        U = self.env(meta.in_last[0])
        outs = [self.env(cell) for cell in meta.out_first]
        slotU = layout.cell_slot[meta.in_last[0]]
        split = self.controls.splits[junc.id]
        for c in range(layout.N):
            alpha = split[c, self.subs, :]
            k, kp = U.k[:, c], U.kp[:, c]
            rowU = self._row(c, slotU)
            for i, Wi in enumerate(outs):
                ds = rec.demand_side[:, i, c]
                a_i = alpha[:, i]
                own = np.where(ds, a_i * (kp * U.D[:, c] + k * U.Dp[:, c]),
                               kp * Wi.S[:, c])
                cross = np.where(ds, a_i * k * (U.Dp[:, c] - U.D[:, c] * U.inv_r),
                                 -k * U.inv_r * Wi.S[:, c])
                downstream = np.where(ds, 0.0, k * Wi.Sp[:, c])
                slotWi = layout.cell_slot[meta.out_first[i]]
                rowWi = self._row(c, slotWi)
                for g in range(layout.N):
                    v = own if g == c else cross
                    out.add(rowU, self._row(g, slotU), lam * v)
                    out.add(rowWi, self._row(g, slotU), -lam * v)
                    out.add(rowU, self._row(g, slotWi), lam * downstream)
                    out.add(rowWi, self._row(g, slotWi), -lam * downstream)

    def _origin_entries(self, out: _Entries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rec = self.traj.records.junction[junc.id]
        W = self.env(meta.out_first[0])
        rid = junc.outgoing[0]
        slotW = layout.cell_slot[meta.out_first[0]]
        bslot = layout.buffer_slot[rid]
        dt = self.grid.dt
        for c in range(layout.N):
            tag = rec.tags[:, c]
            pos = rec.buffer_positive[:, c].astype(float)
            t2 = tag == int(InflowBranch.SHARE)
            t3 = tag == int(InflowBranch.LEFTOVER)
            t4 = tag == int(InflowBranch.STOCK)
            d_rho = np.where(t2, W.Sp[:, c] / layout.N,
                             np.where(t3, W.Sp[:, c], 0.0))
            rowW = self._row(c, slotW)
            rowB = self._row(c, bslot)
            for g in range(layout.N):
                out.add(rowW, self._row(g, slotW), -lam * d_rho)
                out.add(rowB, self._row(g, slotW), dt * pos * d_rho)
            d_stock = t4 / dt
            out.add(rowW, self._row(c, bslot), -lam * d_stock)
            out.add(rowB, self._row(c, bslot), dt * pos * d_stock)

    def _destination_entries(self, out: _Entries, meta, lam: float) -> None:
        layout = self.layout
        rec = self.traj.records.junction[meta.junction.id]
        U = self.env(meta.in_last[0])
        slotU = layout.cell_slot[meta.in_last[0]]
        for c in range(layout.N):
            act = rec.active[:, c]
            k, kp = U.k[:, c], U.kp[:, c]
            own = np.where(act, kp * U.D[:, c] + k * U.Dp[:, c], 0.0)
            cross = np.where(act, k * (U.Dp[:, c] - U.D[:, c] * U.inv_r), 0.0)
            rowU = self._row(c, slotU)
            for g in range(layout.N):
                out.add(rowU, self._row(g, slotU),
                        lam * (own if g == c else cross))

    # -- control-block assembly -------------------------------------------------

    def control_blocks(self) -> JacobianBlocks:
        layout, lam = self.layout, self.grid.lam
        out = _ControlEntries(self.T, self.controls)
        self._interior_speed_entries(out, lam)
        for meta in layout.junctions:
            kind = meta.junction.kind
            if kind is JunctionKind.LINK11:
                self._link11_control(out, meta, lam)
            elif kind is JunctionKind.MERGE:
                self._merge_control(out, meta, lam)
            elif kind is JunctionKind.DIVERGE_FIFO:
                self._fifo_control(out, meta, lam)
            elif kind is JunctionKind.DIVERGE_NONFIFO:
                self._nonfifo_control(out, meta, lam)
            elif kind is JunctionKind.ORIGIN:
                self._origin_control(out, meta, lam)
            elif kind is JunctionKind.DESTINATION:
                self._destination_control(out, meta, lam)
        return out.build(layout.N * layout.M, self.subs)

    def _interior_speed_entries(self, out: _ControlEntries, lam: float) -> None:
        layout = self.layout
        rec = self.traj.records
        for road in layout.network.roads:
            if not self._speed_free(road.id):
                continue
            sl = layout.cell_slice[road.id]
            up = np.arange(sl.start, sl.stop - 1)
            dn = up + 1
            rho_up = self.dens[:, :, up]
            r_up = rho_up.sum(axis=1)
            r_dn = self.dens[:, :, dn].sum(axis=1)
            R = np.array([p.r_max for p in road.per_class])[None, :, None]
            rcr = 0.5 * R
            eps = layout.eps_cell[sl.start]
            ok = r_up >= eps
            k = np.where(ok[:, None, :], rho_up / np.where(ok, r_up, 1.0)[:, None, :],
                         0.0)
            m = np.minimum(r_up[:, None, :], rcr)
            dDdV = m * (1.0 - m / R)
            mm = np.maximum(r_dn[:, None, :], rcr)
            dSdV = mm * (1.0 - mm / R)
            dem = rec.interior_demand[road.id]
            val = np.where(dem, k * dDdV, k * dSdV)
            for c in range(layout.N):
                for i, cell in enumerate(up):
                    rowU = self._row(c, layout.cell_slot[cell])
                    rowD = self._row(c, layout.cell_slot[cell + 1])
                    out.add(rowU, SPEED, road.id, c, 0, lam * val[:, c, i])
                    out.add(rowD, SPEED, road.id, c, 0, -lam * val[:, c, i])

    def _link11_control(self, out: _ControlEntries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        up_rid, dn_rid = junc.incoming[0], junc.outgoing[0]
        if not (self._speed_free(up_rid) or self._speed_free(dn_rid)):
            return
        rec = self.traj.records.junction[junc.id]
        U = self.env(meta.in_last[0])
        W = self.env(meta.out_first[0])
        slotU = layout.cell_slot[meta.in_last[0]]
        slotW = layout.cell_slot[meta.out_first[0]]
        for c in range(layout.N):
            dem = rec.demand[:, c]
            rowU, rowW = self._row(c, slotU), self._row(c, slotW)
            if self._speed_free(up_rid):
                v = np.where(dem, U.k[:, c] * U.dDdV[:, c], 0.0)
                out.add(rowU, SPEED, up_rid, c, 0, lam * v)
                out.add(rowW, SPEED, up_rid, c, 0, -lam * v)
            if self._speed_free(dn_rid):
                v = np.where(dem, 0.0, U.k[:, c] * W.dSdV[:, c])
                out.add(rowU, SPEED, dn_rid, c, 0, lam * v)
                out.add(rowW, SPEED, dn_rid, c, 0, -lam * v)

    def _merge_control(self, out: _ControlEntries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rec = self.traj.records.junction[junc.id]
        envs = [self.env(cell) for cell in meta.in_last]
        W = self.env(meta.out_first[0])
        slotW = layout.cell_slot[meta.out_first[0]]
        out_rid = junc.outgoing[0]
        prio = self.controls.priorities[junc.id]
        prio_free = junc.id in self.controls.free_priorities
        for c in range(layout.N):
            p = prio[c, self.subs, :]
            rowW = self._row(c, slotW)
            for i, Ui in enumerate(envs):
                tag = rec.tags[:, i, c]
                t1 = tag == int(MergeBranch.DEMAND)
                t2 = tag == int(MergeBranch.PRIORITY)
                t3 = tag == int(MergeBranch.LEFTOVER)
                k = Ui.k[:, c]
                rowUi = self._row(c, layout.cell_slot[meta.in_last[i]])

                if prio_free:
                    v = np.where(t2, k * W.S[:, c], 0.0)
                    out.add(rowUi, PRIORITY, junc.id, c, i, lam * v)
                    out.add(rowW, PRIORITY, junc.id, c, i, -lam * v)
                if self._speed_free(junc.incoming[i]):
                    v = np.where(t1, k * Ui.dDdV[:, c], 0.0)
                    out.add(rowUi, SPEED, junc.incoming[i], c, 0, lam * v)
                    out.add(rowW, SPEED, junc.incoming[i], c, 0, -lam * v)
                for j in range(len(envs)):
                    if j == i or not self._speed_free(junc.incoming[j]):
                        continue
                    v = np.where(t3, -k * envs[j].dDdV[:, c], 0.0)
                    out.add(rowUi, SPEED, junc.incoming[j], c, 0, lam * v)
                    out.add(rowW, SPEED, junc.incoming[j], c, 0, -lam * v)
                if self._speed_free(out_rid):
                    v = k * W.dSdV[:, c] * (np.where(t2, p[:, i], 0.0) + t3)
                    out.add(rowUi, SPEED, out_rid, c, 0, lam * v)
                    out.add(rowW, SPEED, out_rid, c, 0, -lam * v)

    def _fifo_control(self, out: _ControlEntries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rec = self.traj.records.junction[junc.id]
        U = self.env(meta.in_last[0])
        outs = [self.env(cell) for cell in meta.out_first]
        slotU = layout.cell_slot[meta.in_last[0]]
        M_out = len(junc.outgoing)
        split = self.controls.splits[junc.id]
        split_free = junc.id in self.controls.free_splits
        for c in range(layout.N):
            alpha = split[c, self.subs, :]
            code = rec.branch[:, c]
            k = U.k[:, c]
            rowU = self._row(c, slotU)
            rows_dn = [self._row(c, layout.cell_slot[cell])
                       for cell in meta.out_first]
            case0 = code == 0
            # the active bound on the total flux, and the flux itself
            beta = np.where(case0, U.D[:, c], 0.0)
            ratios, inv_as = [], []
            for j, Wj in enumerate(outs):
                a_j = alpha[:, j]
                ratio = np.zeros(self.T)
                np.divide(Wj.S[:, c], a_j, out=ratio, where=a_j > 0)
                inv_a = np.zeros(self.T)
                np.divide(1.0, a_j, out=inv_a, where=a_j > 0)
                ratios.append(ratio)
                inv_as.append(inv_a)
                beta = beta + np.where(code == j + 1, ratio, 0.0)
            gamma_up = k * beta

            if split_free:
                for m_comp in range(M_out):
                    sel = code == m_comp + 1
                    d_up = np.where(sel, -k * ratios[m_comp] * inv_as[m_comp], 0.0)
                    out.add(rowU, SPLIT, junc.id, c, m_comp, lam * d_up)
                    for i in range(M_out):
                        d_in = alpha[:, i] * d_up
                        if i == m_comp:
                            d_in = d_in + gamma_up
                        out.add(rows_dn[i], SPLIT, junc.id, c, m_comp,
                                -lam * d_in)
            if self._speed_free(junc.incoming[0]):
                d_up = np.where(case0, k * U.dDdV[:, c], 0.0)
                out.add(rowU, SPEED, junc.incoming[0], c, 0, lam * d_up)
                for i in range(M_out):
                    out.add(rows_dn[i], SPEED, junc.incoming[0], c, 0,
                            -lam * alpha[:, i] * d_up)
            for j in range(M_out):
                if not self._speed_free(junc.outgoing[j]):
                    continue
                sel = code == j + 1
                d_up = np.where(sel, k * inv_as[j] * outs[j].dSdV[:, c], 0.0)
                out.add(rowU, SPEED, junc.outgoing[j], c, 0, lam * d_up)
                for i in range(M_out):
                    out.add(rows_dn[i], SPEED, junc.outgoing[j], c, 0,
                            -lam * alpha[:, i] * d_up)

    def _nonfifo_control(self, out: _ControlEntries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rec = self.traj.records.junction[junc.id]
        U = self.env(meta.in_last[0])
        outs = [self.env(cell) for cell in meta.out_first]
        slotU = layout.cell_slot[meta.in_last[0]]
        split = self.controls.splits[junc.id]
        split_free = junc.id in self.controls.free_splits
        for c in range(layout.N):
            alpha = split[c, self.subs, :]
            k = U.k[:, c]
            rowU = self._row(c, slotU)
            for i, Wi in enumerate(outs):
                ds = rec.demand_side[:, i, c]
                rowWi = self._row(c, layout.cell_slot[meta.out_first[i]])
                if split_free:
                    v = np.where(ds, k * U.D[:, c], 0.0)
                    out.add(rowU, SPLIT, junc.id, c, i, lam * v)
                    out.add(rowWi, SPLIT, junc.id, c, i, -lam * v)
                if self._speed_free(junc.incoming[0]):
                    v = np.where(ds, alpha[:, i] * k * U.dDdV[:, c], 0.0)
                    out.add(rowU, SPEED, junc.incoming[0], c, 0, lam * v)
                    out.add(rowWi, SPEED, junc.incoming[0], c, 0, -lam * v)
                if self._speed_free(junc.outgoing[i]):
                    v = np.where(ds, 0.0, k * Wi.dSdV[:, c])
                    out.add(rowU, SPEED, junc.outgoing[i], c, 0, lam * v)
                    out.add(rowWi, SPEED, junc.outgoing[i], c, 0, -lam * v)

    def _origin_control(self, out: _ControlEntries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rid = junc.outgoing[0]
        if not self._speed_free(rid):
            return
        rec = self.traj.records.junction[junc.id]
        W = self.env(meta.out_first[0])
        slotW = layout.cell_slot[meta.out_first[0]]
        bslot = layout.buffer_slot[rid]
        bcol = layout.buffer_col[rid]
        dt = self.grid.dt
        queued = self.bufs[:, :, bcol] > 0  # (T, N)
        for c in range(layout.N):
            tag = rec.tags[:, c]
            pos = rec.buffer_positive[:, c].astype(float)
            t1 = tag == int(InflowBranch.DEMAND)
            t2 = tag == int(InflowBranch.SHARE)
            t3 = tag == int(InflowBranch.LEFTOVER)
            rowW = self._row(c, slotW)
            rowB = self._row(c, bslot)
            # own-speed term: queued demand is the capacity V R / 4
            own = (t1 * queued[:, c] * 0.25 * W.R[c]
                   + t2 * W.dSdV[:, c] / layout.N + t3 * W.dSdV[:, c])
            out.add(rowW, SPEED, rid, c, 0, -lam * own)
            out.add(rowB, SPEED, rid, c, 0, dt * pos * own)
            for g in range(layout.N):
                if g == c:
                    continue
                v = t3 * (-0.25 * W.R[g]) * queued[:, g]
                out.add(rowW, SPEED, rid, g, 0, -lam * v)
                out.add(rowB, SPEED, rid, g, 0, dt * pos * v)

    def _destination_control(self, out: _ControlEntries, meta, lam: float) -> None:
        layout = self.layout
        junc = meta.junction
        rid = junc.incoming[0]
        if not self._speed_free(rid):
            return
        rec = self.traj.records.junction[junc.id]
        U = self.env(meta.in_last[0])
        slotU = layout.cell_slot[meta.in_last[0]]
        for c in range(layout.N):
            act = rec.active[:, c]
            v = np.where(act, U.k[:, c] * U.dDdV[:, c], 0.0)
            out.add(self._row(c, slotU), SPEED, rid, c, 0, lam * v)


def assemble_state_jacobian(traj: Trajectory, grid: GridSpec) -> JacobianBlocks:
    """Blocks coupling each state to the next step's update equations."""
    return _Assembler(traj, grid).state_blocks()


def assemble_control_jacobian(traj: Trajectory, grid: GridSpec) -> JacobianBlocks:
    """Blocks coupling the free controls to each step's update equations."""
    return _Assembler(traj, grid).control_blocks()


def solve_adjoint(blocks: JacobianBlocks, dJdy: np.ndarray) -> np.ndarray:
    """Backward substitution of the transposed block-triangular system.

    ``dJdy`` has shape (T + 1, state size). The unit diagonal blocks make
    each backward step an explicit update, so the full system matrix is
    never materialised.
    """
    T = blocks.steps
    NM = blocks.n_rows
    dJ = dJdy.reshape(T + 1, NM)
    xi = np.empty((T + 1, NM))
    xi[T] = -dJ[T]
    for t in range(T - 1, -1, -1):
        back = np.bincount(blocks.cols,
                           weights=blocks.vals[t] * xi[t + 1][blocks.rows],
                           minlength=NM)
        xi[t] = -dJ[t] - back
    return xi


def gradient(objective: Objective, network: Network, grid: GridSpec,
             controls: ControlSchedule,
             layout: Optional[NetworkLayout] = None) -> GradientReport:
    """Run the forward pass and one backward sweep; return value and gradient."""
    layout = layout or NetworkLayout(network)
    traj = simulate(network, grid, controls, record=True, layout=layout)
    value = costs_mod.objective_value(objective, traj, grid)
    T = traj.steps
    NM = layout.N * layout.M
    dJdy = costs_mod.d_cost_dy(objective, traj, grid).reshape(T + 1, NM)
    grad = costs_mod.d_cost_du(objective, traj, grid, controls)
    state_blocks = assemble_state_jacobian(traj, grid)
    control_blocks = assemble_control_jacobian(traj, grid)
    xi = solve_adjoint(state_blocks, dJdy)
    U = controls.free_size()
    if control_blocks.rows.size:
        for t in range(T):
            grad += np.bincount(
                control_blocks.step_cols(t),
                weights=control_blocks.vals[t] * xi[t + 1][control_blocks.rows],
                minlength=U)
    tie_sites = traj.records.tie_site_count()
    return GradientReport(value=value, gradient=grad,
                          adjoint_norm=float(np.linalg.norm(xi[1:])),
                          tie_sites=tie_sites)
