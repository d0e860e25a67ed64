"""Interface and junction flux solvers for the multi-class Godunov scheme.

Every solver returns, besides the per-class fluxes, a *branch tag* per flux
site identifying which argument of the min/max comparisons was active, plus
a *margin*: the smallest absolute gap between competing arguments. The
backward sensitivity pass reuses the recorded branch instead of re-deciding,
which keeps the gradient consistent with the forward evaluation; the margins
feed the nonsmoothness diagnostics.

Tie conventions: the first listed alternative wins every min/max (demand
before supply, the priority share before the leftover term), matching the
derivative branch selection of the sensitivity pass.

Vehicles are split between classes by the fraction k = rho_c / r of the
total density in the *upstream* cell; below the vacuum threshold (1e-12 of
the jam density) the fraction is defined as 0, so empty cells emit nothing.
"""

from __future__ import annotations

from enum import IntEnum
from typing import Sequence

import numpy as np

from .diagram import FundamentalDiagram

VACUUM_REL = 1e-12

FIFO_DEMAND = 0  # FIFO branch code; codes >= 1 name the limiting outgoing road


class MergeBranch(IntEnum):
    DEMAND = 1     # incoming demand limits
    PRIORITY = 2   # priority share of the downstream supply limits
    LEFTOVER = 3   # supply minus the other roads' demands limits


class InflowBranch(IntEnum):
    DEMAND = 1     # buffer/inflow demand limits
    SHARE = 2      # 1/N share of the first-cell supply limits
    LEFTOVER = 3   # supply minus other classes' demands limits
    STOCK = 4      # queued vehicles plus arrivals limit (buffer emptying)


def vacuum_threshold(diagrams: Sequence[FundamentalDiagram]) -> float:
    return VACUUM_REL * max(d.R for d in diagrams)


def class_fraction(rho: np.ndarray, eps: float) -> np.ndarray:
    """Per-class share rho_c / r, zero below the vacuum threshold."""
    rho = np.asarray(rho, dtype=float)
    r = rho.sum(axis=0)
    out = np.zeros_like(rho)
    np.divide(rho, r, out=out, where=r >= eps)
    return out


def _demands(diagrams: Sequence[FundamentalDiagram], r: float) -> np.ndarray:
    return np.array([d.demand(r) for d in diagrams], dtype=float)


def _supplies(diagrams: Sequence[FundamentalDiagram], r: float) -> np.ndarray:
    return np.array([d.supply(r) for d in diagrams], dtype=float)


def _check_state(rho: np.ndarray, diagrams: Sequence[FundamentalDiagram]) -> None:
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < -1e-12):
        raise ValueError("negative class density")
    if rho.sum(axis=0).max(initial=0.0) > max(d.R for d in diagrams) * (1 + 1e-12):
        raise ValueError("total density exceeds the jam density")


# ---------------------------------------------------------------------------
# kernels on precomputed demand/supply values (used by the simulator)
# ---------------------------------------------------------------------------

def godunov_kernel(k_up, D_up, S_down):
    """Godunov interface flux k * min(D, S) with demand tag and margin."""
    demand = D_up <= S_down
    flux = k_up * np.where(demand, D_up, S_down)
    return flux, demand, np.abs(D_up - S_down)


def merge_kernel(k_in, D_in, S_out, priorities):
    """M-to-1 merge allocation.

    ``k_in``/``D_in`` have shape (M, N) over incoming roads and classes,
    ``S_out`` shape (N,), ``priorities`` shape (N, M) with stochastic rows.
    Returns per-incoming fluxes (M, N), tags (M, N) and margins (M, N); the
    downstream inflow is the sum over incoming roads.
    """
    D_in = np.asarray(D_in, dtype=float)
    S_out = np.asarray(S_out, dtype=float)
    p = np.asarray(priorities, dtype=float).T  # (M, N)
    others = D_in.sum(axis=0, keepdims=True) - D_in
    share = p * S_out[None, :]
    leftover = S_out[None, :] - others
    share_wins = share >= leftover
    inner = np.where(share_wins, share, leftover)
    demand_wins = D_in <= inner
    limit = np.where(demand_wins, D_in, inner)
    tags = np.where(demand_wins, int(MergeBranch.DEMAND),
                    np.where(share_wins, int(MergeBranch.PRIORITY),
                             int(MergeBranch.LEFTOVER))).astype(np.int8)
    margins = np.minimum(np.abs(D_in - inner), np.abs(share - leftover))
    return k_in * limit, tags, margins


def fifo_kernel(k_in, D_in, S_out, splits):
    """1-to-M FIFO diverge: total flux limited by the tightest branch.

    ``D_in`` shape (N,), ``S_out`` shape (M, N), ``splits`` shape (N, M).
    Returns the upstream per-class flux (N,), per-outgoing inflows (M, N),
    branch codes (N,) (0 = demand, i >= 1 = supply of outgoing road i) and
    margins (N,). A zero split leaves that road unconstrained and empty.
    """
    D_in = np.asarray(D_in, dtype=float)
    S_out = np.asarray(S_out, dtype=float)
    alpha = np.asarray(splits, dtype=float).T  # (M, N)
    ratio = np.full_like(S_out, np.inf)
    np.divide(S_out, alpha, out=ratio, where=alpha > 0)
    cand = np.vstack([D_in[None, :], ratio])  # (M + 1, N)
    branch = np.argmin(cand, axis=0).astype(np.int8)
    beta = cand[branch, np.arange(cand.shape[1])]
    gamma_out = k_in * beta
    gamma_in = alpha * gamma_out[None, :]
    part = np.partition(cand, 1, axis=0)
    margins = part[1] - part[0]
    margins[~np.isfinite(margins)] = np.inf
    return gamma_out, gamma_in, branch, margins


def nonfifo_kernel(k_in, D_in, S_out, splits):
    """1-to-M non-FIFO diverge: each branch limited independently.

    Shapes as in :func:`fifo_kernel`. Returns per-outgoing inflows (M, N),
    demand-side tags (M, N) and margins (M, N); the upstream flux is the sum.
    """
    D_in = np.asarray(D_in, dtype=float)
    S_out = np.asarray(S_out, dtype=float)
    alpha = np.asarray(splits, dtype=float).T
    wish = alpha * D_in[None, :]
    demand_side = wish <= S_out
    gamma_in = k_in[None, :] * np.where(demand_side, wish, S_out)
    return gamma_in, demand_side, np.abs(wish - S_out)


def origin_kernel(buffers, F_in, S_first, Q_crit, dt):
    """Origin inflow allocation across classes.

    The demand of class c is the road capacity while its queue is nonempty
    and the arrival rate otherwise; the downstream supply is shared via the
    merge-style max of the 1/N share and the leftover term. A final stock
    argument ``l/dt + F_in`` caps the flux by the vehicles actually
    available, so queues drain exactly to zero and mass is conserved.

    All arguments are (N,) arrays; returns (flux, tags, margins).
    """
    buffers = np.asarray(buffers, dtype=float)
    F_in = np.asarray(F_in, dtype=float)
    queued = buffers > 0
    demand = np.where(queued, Q_crit, F_in)
    others = demand.sum() - demand
    share = S_first / buffers.shape[0]
    leftover = S_first - others
    share_wins = share >= leftover
    inner = np.where(share_wins, share, leftover)
    stock = buffers / dt + F_in
    demand_wins = demand <= np.minimum(inner, stock)
    inner_wins = inner <= stock
    flux = np.minimum(demand, np.minimum(inner, stock))
    tags = np.where(
        demand_wins, int(InflowBranch.DEMAND),
        np.where(inner_wins,
                 np.where(share_wins, int(InflowBranch.SHARE),
                          int(InflowBranch.LEFTOVER)),
                 int(InflowBranch.STOCK))).astype(np.int8)
    margins = np.minimum(np.abs(demand - inner), np.abs(share - leftover))
    margins = np.minimum(margins, np.abs(demand - stock))
    margins = np.minimum(margins, np.abs(inner - stock))
    return flux, tags, margins


def destination_kernel(k_last, D_last, caps):
    """Destination outflow min(k D, cap); the tag marks the uncapped branch."""
    raw = k_last * D_last
    active = raw <= caps
    return np.where(active, raw, caps), active, np.abs(raw - caps)


# ---------------------------------------------------------------------------
# solver fronts on raw states and diagrams (spec operations / tests)
# ---------------------------------------------------------------------------

def interior_flux(rho_up, rho_down, diagrams: Sequence[FundamentalDiagram]):
    """Per-class Godunov flux between two cells sharing one diagram set."""
    return link11_flux(rho_up, rho_down, diagrams, diagrams)


def link11_flux(rho_up, rho_down, d_up: Sequence[FundamentalDiagram],
                d_down: Sequence[FundamentalDiagram]):
    """Per-class flux through a 1x1 junction (road-specific diagrams)."""
    _check_state(rho_up, d_up)
    _check_state(rho_down, d_down)
    rho_up = np.asarray(rho_up, dtype=float)
    r_up = rho_up.sum()
    r_down = np.asarray(rho_down, dtype=float).sum()
    k = class_fraction(rho_up, vacuum_threshold(d_up))
    return godunov_kernel(k, _demands(d_up, r_up), _supplies(d_down, r_down))


def merge_flux(rho_ins, rho_out, priorities,
               d_ins: Sequence[Sequence[FundamentalDiagram]],
               d_out: Sequence[FundamentalDiagram]):
    """M-to-1 merge fluxes from end-of-road states and the outgoing start state.

    Returns (gamma_out (M, N), gamma_in (N,), tags, margins); mass
    conservation gamma_in = sum of gamma_out holds by construction.
    """
    priorities = np.asarray(priorities, dtype=float)
    if not np.allclose(priorities.sum(axis=-1), 1.0, atol=1e-9) or \
            np.any(priorities < -1e-12):
        raise ValueError("priorities must be stochastic over incoming roads")
    k_in = np.stack([class_fraction(np.asarray(rho, dtype=float),
                                    vacuum_threshold(d))
                     for rho, d in zip(rho_ins, d_ins)])
    D_in = np.stack([_demands(d, np.asarray(rho, dtype=float).sum())
                     for rho, d in zip(rho_ins, d_ins)])
    S_out = _supplies(d_out, np.asarray(rho_out, dtype=float).sum())
    gamma_out, tags, margins = merge_kernel(k_in, D_in, S_out, priorities)
    return gamma_out, gamma_out.sum(axis=0), tags, margins


def fifo_diverge_flux(rho_in, rho_outs, splits,
                      d_in: Sequence[FundamentalDiagram],
                      d_outs: Sequence[Sequence[FundamentalDiagram]]):
    """1-to-M FIFO diverge fluxes; see :func:`fifo_kernel` for conventions."""
    splits = np.asarray(splits, dtype=float)
    if not np.allclose(splits.sum(axis=-1), 1.0, atol=1e-9) or \
            np.any(splits < -1e-12):
        raise ValueError("splits must be stochastic over outgoing roads")
    rho_in = np.asarray(rho_in, dtype=float)
    k = class_fraction(rho_in, vacuum_threshold(d_in))
    D_in = _demands(d_in, rho_in.sum())
    S_out = np.stack([_supplies(d, np.asarray(rho, dtype=float).sum())
                      for rho, d in zip(rho_outs, d_outs)])
    return fifo_kernel(k, D_in, S_out, splits)


def nonfifo_diverge_flux(rho_in, rho_outs, splits,
                         d_in: Sequence[FundamentalDiagram],
                         d_outs: Sequence[Sequence[FundamentalDiagram]]):
    """1-to-M non-FIFO diverge fluxes; blocked branches do not stall the rest."""
    splits = np.asarray(splits, dtype=float)
    if not np.allclose(splits.sum(axis=-1), 1.0, atol=1e-9) or \
            np.any(splits < -1e-12):
        raise ValueError("splits must be stochastic over outgoing roads")
    rho_in = np.asarray(rho_in, dtype=float)
    k = class_fraction(rho_in, vacuum_threshold(d_in))
    D_in = _demands(d_in, rho_in.sum())
    S_out = np.stack([_supplies(d, np.asarray(rho, dtype=float).sum())
                      for rho, d in zip(rho_outs, d_outs)])
    gamma_in, demand_side, margins = nonfifo_kernel(k, D_in, S_out, splits)
    return gamma_in.sum(axis=0), gamma_in, demand_side, margins


def origin_inflow(buffers, rho_first, F_in,
                  diagrams: Sequence[FundamentalDiagram], dt: float):
    """Per-class flux from an origin buffer into the first road cell."""
    rho_first = np.asarray(rho_first, dtype=float)
    S_first = _supplies(diagrams, rho_first.sum())
    Q_crit = np.array([d.flux(d.critical_density()) for d in diagrams])
    return origin_kernel(np.asarray(buffers, dtype=float),
                         np.asarray(F_in, dtype=float), S_first, Q_crit, dt)


def buffer_update(buffers, F_in, gamma_in, dt: float):
    """Queue update l + dt (F_in - gamma), clamped at zero.

    Returns the new lengths and the strict-positivity tag of the unclamped
    expression (the branch used by the sensitivity pass).
    """
    inner = np.asarray(buffers, dtype=float) + dt * (
        np.asarray(F_in, dtype=float) - np.asarray(gamma_in, dtype=float))
    positive = inner > 0
    return np.where(positive, inner, 0.0), positive


def destination_outflow(rho_last, F_out, diagrams: Sequence[FundamentalDiagram]):
    """Per-class flux leaving the network, limited by the per-class caps."""
    rho_last = np.asarray(rho_last, dtype=float)
    k = class_fraction(rho_last, vacuum_threshold(diagrams))
    D_last = _demands(diagrams, rho_last.sum())
    return destination_kernel(k, D_last, np.asarray(F_out, dtype=float))
