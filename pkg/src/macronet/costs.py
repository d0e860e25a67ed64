"""Travel-performance functionals and their exact trajectory/control derivatives.

Total travel time is the space-time sum of densities plus the queue dwell
term; total travel distance is the space-time sum of the per-class flows
``rho_c v_c(r)``. Both sums run over every stored state index 0..T. The
derivative routines return dense arrays laid out like the adjoint state
(one slot per buffer and cell, classes stacked), which the adjoint engine
consumes directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .controls import SPEED, ControlSchedule
from .network import GridSpec
from .simulation import Trajectory


class ObjectiveKind(Enum):
    TTT = "ttt"
    TTD = "ttd"
    WEIGHTED = "weighted"


@dataclass(frozen=True)
class Objective:
    """Which functional to evaluate, for which classes, with which weights."""

    kind: ObjectiveKind
    classes: Optional[tuple[int, ...]] = None  # None selects every class
    w_ttt: float = 1.0
    w_ttd: float = 0.0

    def __post_init__(self) -> None:
        if self.kind is ObjectiveKind.WEIGHTED:
            if self.w_ttt < 0 or self.w_ttd < 0 or self.w_ttt + self.w_ttd == 0:
                raise ValueError("weights must be non-negative and not both zero")

    def class_mask(self, class_count: int) -> np.ndarray:
        mask = np.zeros(class_count, dtype=bool)
        mask[list(self.classes) if self.classes is not None
             else range(class_count)] = True
        return mask


def ttt(traj: Trajectory, grid: GridSpec,
        classes: Optional[tuple[int, ...]] = None) -> float:
    """Total travel time: dt dx sum(rho) over all states plus dt sum(queues)."""
    mask = _mask(traj, classes)
    cells = traj.densities[:, mask, :].sum()
    queued = traj.buffers[:, mask, :].sum()
    return float(grid.dt * grid.dx * cells + grid.dt * queued)


def ttd(traj: Trajectory, grid: GridSpec,
        classes: Optional[tuple[int, ...]] = None) -> float:
    """Total travel distance: dt dx sum(rho_c v_c(r)) over all states."""
    mask = _mask(traj, classes)
    v = _speeds(traj)
    return float(grid.dt * grid.dx * (traj.densities[:, mask, :]
                                      * v[:, mask, :]).sum())


def _mask(traj: Trajectory, classes) -> np.ndarray:
    mask = np.zeros(traj.layout.N, dtype=bool)
    mask[list(classes) if classes is not None else range(traj.layout.N)] = True
    return mask


def _subinterval_indices(controls: ControlSchedule, steps: int) -> np.ndarray:
    return np.minimum(np.arange(steps + 1) * controls.n // steps,
                      controls.n - 1)


def _effective_speed_table(traj: Trajectory) -> np.ndarray:
    """(T + 1, N, C) effective max speeds; collapses when no limits are set."""
    layout, controls = traj.layout, traj.controls
    subs = _subinterval_indices(controls, traj.steps)
    if not controls.speed_limits:
        return np.broadcast_to(layout.V_base, (traj.steps + 1, layout.N, layout.C))
    table = np.empty((controls.n, layout.N, layout.C))
    for j in range(controls.n):
        table[j] = layout.effective_speeds(controls, j)
    return table[subs]


def _speeds(traj: Trajectory) -> np.ndarray:
    layout = traj.layout
    V = _effective_speed_table(traj)
    r = traj.densities.sum(axis=1, keepdims=True)
    return V * np.maximum(1.0 - r / layout.R_all, 0.0)


def objective_value(objective: Objective, traj: Trajectory,
                    grid: GridSpec) -> float:
    if objective.kind is ObjectiveKind.TTT:
        return ttt(traj, grid, objective.classes)
    if objective.kind is ObjectiveKind.TTD:
        return ttd(traj, grid, objective.classes)
    return (objective.w_ttt * ttt(traj, grid, objective.classes)
            + objective.w_ttd * ttd(traj, grid, objective.classes))


def objective_from_sums(objective: Objective, ttt_class: np.ndarray,
                        ttd_class: np.ndarray) -> float:
    """Scalarise per-class functional values (the trajectory-free fast path)."""
    mask = objective.class_mask(len(ttt_class))
    t = float(ttt_class[mask].sum())
    d = float(ttd_class[mask].sum())
    if objective.kind is ObjectiveKind.TTT:
        return t
    if objective.kind is ObjectiveKind.TTD:
        return d
    return objective.w_ttt * t + objective.w_ttd * d


def _d_ttt_dy(traj: Trajectory, grid: GridSpec, mask: np.ndarray) -> np.ndarray:
    layout = traj.layout
    out = np.zeros((traj.steps + 1, layout.N, layout.M))
    out[:, mask, :] = grid.dt * grid.dx
    for slot in layout.buffer_slot.values():
        out[:, :, slot] = 0.0
        out[:, mask, slot] = grid.dt
    return out


def _d_ttd_dy(traj: Trajectory, grid: GridSpec, mask: np.ndarray) -> np.ndarray:
    layout = traj.layout
    V = _effective_speed_table(traj)
    r = traj.densities.sum(axis=1, keepdims=True)
    v = V * np.maximum(1.0 - r / layout.R_all, 0.0)
    # d v_c / d r vanishes once the speed is clamped at zero
    vp = np.where(r < layout.R_all, -V / layout.R_all, 0.0)
    coupling = (traj.densities[:, mask, :] * vp[:, mask, :]).sum(axis=1)
    entries = np.where(mask[None, :, None], v, 0.0) + coupling[:, None, :]
    out = np.zeros((traj.steps + 1, layout.N, layout.M))
    out[:, :, layout.cell_slot] = grid.dt * grid.dx * entries
    return out


def d_cost_dy(objective: Objective, traj: Trajectory,
              grid: GridSpec) -> np.ndarray:
    """Exact dJ/dy per (state index, class, slot); slots follow the adjoint layout."""
    mask = objective.class_mask(traj.layout.N)
    if objective.kind is ObjectiveKind.TTT:
        return _d_ttt_dy(traj, grid, mask)
    if objective.kind is ObjectiveKind.TTD:
        return _d_ttd_dy(traj, grid, mask)
    return (objective.w_ttt * _d_ttt_dy(traj, grid, mask)
            + objective.w_ttd * _d_ttd_dy(traj, grid, mask))


def d_cost_du(objective: Objective, traj: Trajectory, grid: GridSpec,
              controls: ControlSchedule) -> np.ndarray:
    """Explicit control dependence of the functional.

    Routing and priority controls never appear in the functionals, so the
    only nonzero contribution is the travel-distance term of free speed
    limits: dt dx sum over the subinterval's states of rho_c dv_c/dV.
    """
    grad = np.zeros(controls.free_size())
    wants_ttd = objective.kind is ObjectiveKind.TTD or (
        objective.kind is ObjectiveKind.WEIGHTED and objective.w_ttd != 0)
    if not wants_ttd or not controls.free_speeds:
        return grad
    weight = 1.0 if objective.kind is ObjectiveKind.TTD else objective.w_ttd
    layout = traj.layout
    mask = objective.class_mask(layout.N)
    subs = _subinterval_indices(controls, traj.steps)
    r = traj.densities.sum(axis=1, keepdims=True)
    dv = np.maximum(1.0 - r / layout.R_all, 0.0)
    contrib = traj.densities * dv  # (T + 1, N, C)
    for rid in controls.free_speeds:
        sl = layout.cell_slice[rid]
        per_step = contrib[:, :, sl].sum(axis=2)  # (T + 1, N)
        for c in np.nonzero(mask)[0]:
            for j in range(controls.n):
                total = per_step[subs == j, c].sum()
                for col, w in controls.columns(SPEED, rid, int(c), j, 0):
                    grad[col] += weight * grid.dt * grid.dx * w * total
    return grad
