"""Projected-gradient optimisation, exhaustive grid studies and Pareto sweeps.

The single-objective solver is projected gradient descent with Armijo
backtracking on the projection arc: box components are clipped, stochastic
vectors of junctions wider than two roads are projected onto the simplex.
The multi-objective front is traced by minimising weighted sums of the two
travel functionals, with weights normalised by the starting point so both
terms enter at comparable scale.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Optional, Sequence

import numpy as np

from . import adjoint as adjoint_mod
from .controls import ControlSchedule
from .costs import Objective, ObjectiveKind, objective_from_sums
from .fd import fd_gradient
from .network import GridSpec, Network
from .simulation import simulate_objectives


@dataclass(frozen=True)
class OptimizerConfig:
    """Budgets, tolerances and line-search parameters of the descent loop."""

    max_iterations: int = 150
    max_evaluations: int = 10_000
    step_tolerance: float = 1e-7
    function_tolerance: float = 1e-7
    optimality_tolerance: float = 1e-6
    armijo_initial_step: float = 1.0
    armijo_shrink: float = 0.5
    armijo_decrease: float = 1e-4
    max_backtracks: int = 30
    gradient_method: str = "adjoint"  # "adjoint" or "fd"
    fd_step: float = 1e-6
    restarts: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.armijo_shrink < 1:
            raise ValueError("shrink factor must lie in (0, 1)")
        for name in ("step_tolerance", "function_tolerance",
                     "optimality_tolerance", "armijo_initial_step",
                     "armijo_decrease"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gradient_method not in ("adjoint", "fd"):
            raise ValueError("gradient method must be 'adjoint' or 'fd'")


@dataclass
class IterationRecord:
    iteration: int
    value: float
    projected_gradient_norm: float
    step_size: float
    evaluations: int


@dataclass
class MinimizeResult:
    controls: ControlSchedule
    vector: np.ndarray
    value: float
    status: str
    iterations: int
    evaluations: int
    log: list[IterationRecord] = field(default_factory=list)


@dataclass
class ParetoPoint:
    vector: np.ndarray
    weight: float
    ttt: float
    ttd: float
    dominated: bool = False


def project_box(u: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(u, lo), hi)


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    idx = np.argsort(v)[::-1]
    cssv = np.cumsum(v[idx]) - 1.0
    rho = np.nonzero(v[idx] * np.arange(1, v.size + 1) > cssv)[0][-1]
    theta = cssv[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def project_controls(u: np.ndarray, schedule: ControlSchedule) -> np.ndarray:
    """Feasible projection: box clipping plus per-slot simplex projection."""
    lo, hi = schedule.bounds()
    out = project_box(np.asarray(u, dtype=float), lo, hi)
    for start, width in schedule.simplex_blocks():
        out[start:start + width] = project_simplex(out[start:start + width])
    return out


def _evaluate(objective: Objective, network: Network, grid: GridSpec,
              schedule: ControlSchedule, u: np.ndarray) -> float:
    ttt_c, ttd_c = simulate_objectives(network, grid, schedule.with_free_vector(u))
    return objective_from_sums(objective, ttt_c, ttd_c)


def _gradient(objective: Objective, network: Network, grid: GridSpec,
              schedule: ControlSchedule, u: np.ndarray,
              config: OptimizerConfig) -> tuple[np.ndarray, int]:
    current = schedule.with_free_vector(u)
    if config.gradient_method == "fd":
        report = fd_gradient(objective, network, grid, current, h=config.fd_step)
        return report.gradient, report.evaluations
    report = adjoint_mod.gradient(objective, network, grid, current)
    return report.gradient, 1


def _descend(objective: Objective, network: Network, grid: GridSpec,
             schedule: ControlSchedule, u0: np.ndarray,
             config: OptimizerConfig) -> MinimizeResult:
    u = project_controls(u0, schedule)
    value = _evaluate(objective, network, grid, schedule, u)
    evaluations = 1
    log: list[IterationRecord] = []
    status = "max_iterations"
    iteration = 0
    for iteration in range(1, config.max_iterations + 1):
        grad, cost = _gradient(objective, network, grid, schedule, u, config)
        evaluations += cost
        pg_norm = float(np.linalg.norm(u - project_controls(u - grad, schedule)))
        if pg_norm <= config.optimality_tolerance:
            log.append(IterationRecord(iteration, value, pg_norm, 0.0, evaluations))
            status = "converged"
            break

        t = config.armijo_initial_step
        accepted = False
        trial, trial_value = u, value
        for _ in range(config.max_backtracks):
            trial = project_controls(u - t * grad, schedule)
            move = trial - u
            move_sq = float(move @ move)
            if move_sq == 0.0:
                break
            trial_value = _evaluate(objective, network, grid, schedule, trial)
            evaluations += 1
            if trial_value <= value - config.armijo_decrease / t * move_sq:
                accepted = True
                break
            t *= config.armijo_shrink
            if evaluations >= config.max_evaluations:
                break
        log.append(IterationRecord(iteration, value, pg_norm,
                                   t if accepted else 0.0, evaluations))
        if not accepted:
            status = "line_search_failed"
            break
        step_norm = float(np.linalg.norm(trial - u))
        improvement = value - trial_value
        u, value = trial, trial_value
        if step_norm <= config.step_tolerance:
            status = "converged"
            break
        if improvement <= config.function_tolerance * max(1.0, abs(value)):
            status = "converged"
            break
        if evaluations >= config.max_evaluations:
            status = "max_evaluations"
            break
    return MinimizeResult(schedule.with_free_vector(u), u, value, status,
                          iteration, evaluations, log)


def minimize(objective: Objective, network: Network, grid: GridSpec,
             controls: ControlSchedule,
             config: Optional[OptimizerConfig] = None) -> MinimizeResult:
    """Projected gradient descent from the given controls, with multistart.

    The first start is the supplied schedule; further starts draw uniform
    points from the feasible box (seeded). The best final value wins.
    """
    config = config or OptimizerConfig()
    u0 = controls.free_vector()
    rng = np.random.default_rng(config.seed)
    lo, hi = controls.bounds()
    best: Optional[MinimizeResult] = None
    for start in range(max(1, config.restarts)):
        u_start = u0 if start == 0 else rng.uniform(lo, hi)
        result = _descend(objective, network, grid, controls, u_start, config)
        if best is None or result.value < best.value:
            best = result
    return best


# -- exhaustive grid studies -------------------------------------------------

@dataclass
class GridSearchResult:
    """Per-class functional values on a full lattice of split settings."""

    axes: tuple[tuple[str, int], ...]  # (junction id, class index) per axis
    points: np.ndarray                 # shared 1-D lattice, endpoints included
    ttt_class: np.ndarray              # lattice shape + (classes,)
    ttd_class: np.ndarray

    def values(self, objective: Objective) -> np.ndarray:
        flat_t = self.ttt_class.reshape(-1, self.ttt_class.shape[-1])
        flat_d = self.ttd_class.reshape(-1, self.ttd_class.shape[-1])
        out = np.array([objective_from_sums(objective, t, d)
                        for t, d in zip(flat_t, flat_d)])
        return out.reshape(self.ttt_class.shape[:-1])

    def minimum(self, objective: Objective) -> tuple[tuple[float, ...], float]:
        vals = self.values(objective)
        flat = int(np.argmin(vals))
        coords = np.unravel_index(flat, vals.shape)
        return tuple(float(self.points[i]) for i in coords), float(vals[flat])


def _apply_axes(schedule: ControlSchedule, axes: Sequence[tuple[str, int]],
                values: Sequence[float]) -> ControlSchedule:
    splits = dict(schedule.splits)
    for (jid, class_idx), value in zip(axes, values):
        arr = splits[jid].copy()
        if arr.shape[-1] != 2:
            raise ValueError("grid axes need two-way diverges")
        arr[class_idx, :, 0] = value
        arr[class_idx, :, 1] = 1.0 - value
        splits[jid] = arr
    return replace(schedule, splits=splits)


def _grid_task(args):
    network, grid, schedule, axes, values = args
    ttt_c, ttd_c = simulate_objectives(network, grid,
                                       _apply_axes(schedule, axes, values))
    return ttt_c, ttd_c


def grid_search(network: Network, grid: GridSpec, controls: ControlSchedule,
                axes: Sequence[tuple[str, int]], resolution: int = 30,
                workers: Optional[int] = None) -> GridSearchResult:
    """Evaluate both functionals on a uniform lattice over selected splits.

    Each axis varies the first-road share of one (diverge, class) pair over
    ``resolution`` evenly spaced points in [0, 1], endpoints included.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    points = np.linspace(0.0, 1.0, resolution)
    combos = list(product(points, repeat=len(axes)))
    tasks = [(network, grid, controls, tuple(axes), values) for values in combos]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_grid_task, tasks, chunksize=8))
    else:
        results = [_grid_task(t) for t in tasks]
    shape = (resolution,) * len(axes)
    N = network.class_count
    ttt_class = np.array([r[0] for r in results]).reshape(shape + (N,))
    ttd_class = np.array([r[1] for r in results]).reshape(shape + (N,))
    return GridSearchResult(tuple(axes), points, ttt_class, ttd_class)


# -- weighted-sum Pareto sweep -------------------------------------------------

def _pareto_task(args):
    network, grid, controls, weight, scales, config = args
    ttt0, ttd0 = scales
    objective = Objective(ObjectiveKind.WEIGHTED, w_ttt=weight / ttt0,
                          w_ttd=(1.0 - weight) / ttd0)
    result = minimize(objective, network, grid, controls, config)
    ttt_c, ttd_c = simulate_objectives(
        network, grid, controls.with_free_vector(result.vector))
    return ParetoPoint(result.vector, weight, float(ttt_c.sum()),
                       float(ttd_c.sum()))


def mark_dominated(points: list[ParetoPoint]) -> list[ParetoPoint]:
    for p in points:
        p.dominated = any(
            (q.ttt <= p.ttt and q.ttd <= p.ttd)
            and (q.ttt < p.ttt or q.ttd < p.ttd)
            for q in points)
    return points


def pareto_sweep(network: Network, grid: GridSpec, controls: ControlSchedule,
                 weight_count: int = 11,
                 config: Optional[OptimizerConfig] = None,
                 workers: Optional[int] = None) -> list[ParetoPoint]:
    """Trace the travel time / travel distance trade-off by weighted sums.

    Every weight optimises from the same starting controls (one restart per
    weight; diversity across the sweep substitutes for multistart). Failed
    weights are skipped with a warning. The returned points are sorted by
    travel time and carry dominated flags; dominated points are filtered.
    """
    if weight_count < 2:
        raise ValueError("need at least two weights")
    config = replace(config or OptimizerConfig(), restarts=1)
    ttt_c, ttd_c = simulate_objectives(network, grid, controls)
    scales = (float(ttt_c.sum()), float(ttd_c.sum()))
    weights = np.linspace(0.0, 1.0, weight_count)
    tasks = [(network, grid, controls, float(w), scales, config)
             for w in weights]
    points: list[ParetoPoint] = []
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = list(pool.map(_pareto_task, tasks))
        candidates = futures
    else:
        candidates = []
        for task in tasks:
            try:
                candidates.append(_pareto_task(task))
            except Exception as exc:  # pragma: no cover - defensive
                warnings.warn(f"weight {task[3]:.3f} failed: {exc}")
    points = mark_dominated(list(candidates))
    front = [p for p in points if not p.dominated]
    front.sort(key=lambda p: (p.ttt, p.ttd))
    return front
