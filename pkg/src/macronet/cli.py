"""Command-line interface: simulate / gradient / optimize / grid / pareto.

All floating-point CSV output uses 10 significant digits; identical
invocations with identical seeds produce byte-identical files. Exit codes:
0 success, 1 scenario/controls validation problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
import traceback
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .adjoint import gradient as adjoint_gradient
from .controls import ControlSchedule
from .costs import Objective, ObjectiveKind, objective_from_sums
from .fd import fd_gradient
from .network import JunctionKind, NetworkValidationError
from .optimize import (OptimizerConfig, grid_search, minimize, pareto_sweep)
from .scenario import Scenario, ScenarioError, load_controls, load_scenario
from .simulation import simulate, simulate_objectives


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _objective_from_args(args) -> Objective:
    kind = ObjectiveKind(args.objective)
    classes = None
    if getattr(args, "classes", None):
        classes = tuple(int(c) - 1 for c in args.classes.split(","))
    if kind is ObjectiveKind.WEIGHTED:
        return Objective(kind, classes, w_ttt=args.w_ttt, w_ttd=args.w_ttd)
    return Objective(kind, classes)


def _load(args) -> tuple[Scenario, ControlSchedule]:
    scenario = load_scenario(args.scenario)
    n = getattr(args, "n", None) or 1
    if getattr(args, "controls", None):
        controls = load_controls(args.controls, scenario, n=n)
    else:
        controls = scenario.controls(n=n)
    return scenario, controls


def _add_common(sub: argparse.ArgumentParser, with_n: bool = True) -> None:
    sub.add_argument("scenario", help="scenario JSON file")
    sub.add_argument("--controls", help="controls JSON file (listed groups"
                                        " become the free variables)")
    sub.add_argument("--threads", type=int, default=None,
                     help="parallel worker cap (default: serial)")
    if with_n:
        sub.add_argument("--n", type=int, default=None,
                         help="control subintervals (default 1)")


def _cmd_simulate(args) -> int:
    scenario, controls = _load(args)
    grid = scenario.grid()
    traj = simulate(scenario.network, grid, controls)
    ttt_c, ttd_c = simulate_objectives(scenario.network, grid, controls)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layout = traj.layout
    for c in range(layout.N):
        with open(out / f"density_class{c + 1}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "road", "cell", "density"])
            for nu in range(traj.steps + 1):
                for road in scenario.network.roads:
                    sl = layout.cell_slice[road.id]
                    for j, value in enumerate(traj.densities[nu, c, sl], start=1):
                        writer.writerow([nu, road.id, j, _fmt(value)])
    with open(out / "buffers.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "origin", "class", "length"])
        for nu in range(traj.steps + 1):
            for rid, col in layout.buffer_col.items():
                for c in range(layout.N):
                    writer.writerow([nu, rid, c + 1,
                                     _fmt(traj.buffers[nu, c, col])])
    print(f"TTT={_fmt(float(ttt_c.sum()))} TTD={_fmt(float(ttd_c.sum()))}")
    return 0


def _cmd_gradient(args) -> int:
    scenario, controls = _load(args)
    grid = scenario.grid()
    objective = _objective_from_args(args)
    if args.method == "adjoint":
        report = adjoint_gradient(objective, scenario.network, grid, controls)
        value, grad = report.value, report.gradient
        print(f"# ties_near_branch_switch={report.tie_sites}")
    else:
        ttt_c, ttd_c = simulate_objectives(scenario.network, grid, controls)
        value = objective_from_sums(objective, ttt_c, ttd_c)
        fd = fd_gradient(objective, scenario.network, grid, controls,
                         workers=args.threads)
        grad = fd.gradient
    writer = csv.writer(sys.stdout)
    writer.writerow(["objective", _fmt(value)])
    header = ["control", "id", "class", "subinterval", "component", "value"]
    check = None
    if args.check_fd:
        check = fd_gradient(objective, scenario.network, grid, controls,
                            workers=args.threads)
        header += ["fd_value", "rel_error"]
    writer.writerow(header)
    for i, (kind, ident, c, j, comp) in enumerate(controls.labels()):
        row = [kind, ident, c + 1, j, comp, _fmt(grad[i])]
        if check is not None:
            denom = max(abs(check.gradient[i]), 1e-12)
            row += [_fmt(check.gradient[i]),
                    _fmt(abs(grad[i] - check.gradient[i]) / denom)]
        writer.writerow(row)
    return 0


def _cmd_optimize(args) -> int:
    scenario, controls = _load(args)
    grid = scenario.grid()
    objective = _objective_from_args(args)
    config = OptimizerConfig(gradient_method=args.method,
                             restarts=args.restarts, seed=args.seed,
                             max_iterations=args.max_iterations)
    result = minimize(objective, scenario.network, grid, controls, config)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "value", "projected_gradient_norm",
                             "step_size", "evaluations"])
            for rec in result.log:
                writer.writerow([rec.iteration, _fmt(rec.value),
                                 _fmt(rec.projected_gradient_norm),
                                 _fmt(rec.step_size), rec.evaluations])
    writer = csv.writer(sys.stdout)
    writer.writerow(["status", result.status])
    writer.writerow(["value", _fmt(result.value)])
    writer.writerow(["control", "id", "class", "subinterval", "component",
                     "value"])
    for label, value in zip(controls.labels(), result.vector):
        kind, ident, c, j, comp = label
        writer.writerow([kind, ident, c + 1, j, comp, _fmt(value)])
    return 0


_AXIS_HELP = ("comma-separated axes, each 'junction:class' (1-based class)"
              " or the shorthand a<class>/b<class> for the first/second"
              " diverge in scenario order")


def _parse_axes(spec: str, scenario: Scenario) -> list[tuple[str, int]]:
    diverges = [j.id for j in scenario.network.junctions
                if j.kind in (JunctionKind.DIVERGE_FIFO,
                              JunctionKind.DIVERGE_NONFIFO)]
    axes = []
    for token in spec.split(","):
        token = token.strip()
        if ":" in token:
            jid, cls = token.split(":")
        elif token[:1] in ("a", "b") and token[1:].isdigit():
            index = 0 if token[0] == "a" else 1
            if index >= len(diverges):
                raise ScenarioError(f"axis {token!r}: scenario has"
                                    f" {len(diverges)} diverges")
            jid, cls = diverges[index], token[1:]
        else:
            raise ScenarioError(f"cannot parse axis {token!r}")
        axes.append((jid, int(cls) - 1))
    return axes


def _cmd_grid(args) -> int:
    scenario, controls = _load(args)
    grid = scenario.grid()
    objective = _objective_from_args(args)
    axes = _parse_axes(args.free, scenario)
    result = grid_search(scenario.network, grid, controls, axes,
                         resolution=args.resolution, workers=args.threads)
    coords, best = result.minimum(objective)
    writer = csv.writer(sys.stdout)
    axis_names = [f"{jid}:{c + 1}" for jid, c in axes]
    writer.writerow(["minimum", _fmt(best)]
                    + [_fmt(v) for v in coords])
    if args.out:
        values = result.values(objective)
        with open(args.out, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(axis_names + ["value"])
            it = np.ndindex(*values.shape)
            for idx in it:
                out.writerow([_fmt(result.points[i]) for i in idx]
                             + [_fmt(values[idx])])
    return 0


def _cmd_pareto(args) -> int:
    scenario, controls = _load(args)
    grid = scenario.grid()
    config = OptimizerConfig(gradient_method=args.method, seed=args.seed,
                             max_iterations=args.max_iterations)
    front = pareto_sweep(scenario.network, grid, controls,
                         weight_count=args.weights, config=config,
                         workers=args.threads)
    writer = csv.writer(sys.stdout)
    labels = controls.labels()
    writer.writerow(["ttt", "ttd", "weight"]
                    + [f"{kind}:{ident}:{c + 1}:{j}:{comp}"
                       for kind, ident, c, j, comp in labels])
    rows = [[_fmt(p.ttt), _fmt(p.ttd), _fmt(p.weight)]
            + [_fmt(v) for v in p.vector] for p in front]
    for row in rows:
        writer.writerow(row)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["ttt", "ttd", "weight"]
                         + [f"{kind}:{ident}:{c + 1}:{j}:{comp}"
                            for kind, ident, c, j, comp in labels])
            for row in rows:
                out.writerow(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="macronet",
        description="Multi-class traffic simulation and adjoint-based"
                    " control optimisation on road networks")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    sim = subs.add_parser("simulate", help="run one simulation, write CSVs")
    _add_common(sim)
    sim.add_argument("--out", default="out", help="output directory")
    sim.set_defaults(func=_cmd_simulate)

    gra = subs.add_parser("gradient", help="objective gradient over controls")
    _add_common(gra)
    gra.add_argument("--objective", choices=[k.value for k in ObjectiveKind],
                     default="ttt")
    gra.add_argument("--classes", help="1-based class filter, e.g. 1 or 1,2")
    gra.add_argument("--w-ttt", type=float, default=1.0)
    gra.add_argument("--w-ttd", type=float, default=0.0)
    gra.add_argument("--method", choices=["adjoint", "fd"], default="adjoint")
    gra.add_argument("--check-fd", action="store_true",
                     help="append finite-difference values and errors")
    gra.set_defaults(func=_cmd_gradient)

    opt = subs.add_parser("optimize", help="projected gradient descent")
    _add_common(opt)
    opt.add_argument("--objective", choices=[k.value for k in ObjectiveKind],
                     default="ttt")
    opt.add_argument("--classes")
    opt.add_argument("--w-ttt", type=float, default=1.0)
    opt.add_argument("--w-ttd", type=float, default=0.0)
    opt.add_argument("--method", choices=["adjoint", "fd"], default="adjoint")
    opt.add_argument("--restarts", type=int, default=5)
    opt.add_argument("--seed", type=int, default=0)
    opt.add_argument("--max-iterations", type=int, default=150)
    opt.add_argument("--out", help="iteration-log CSV path")
    opt.set_defaults(func=_cmd_optimize)

    gri = subs.add_parser("grid", help="exhaustive lattice study over splits")
    _add_common(gri, with_n=False)
    gri.add_argument("--free", required=True, help=_AXIS_HELP)
    gri.add_argument("--resolution", type=int, default=30)
    gri.add_argument("--objective", choices=[k.value for k in ObjectiveKind],
                     default="ttt")
    gri.add_argument("--classes")
    gri.add_argument("--w-ttt", type=float, default=1.0)
    gri.add_argument("--w-ttd", type=float, default=0.0)
    gri.add_argument("--out", help="full lattice CSV path")
    gri.set_defaults(func=_cmd_grid)

    par = subs.add_parser("pareto", help="weighted-sum front of TTT vs TTD")
    _add_common(par)
    par.add_argument("--weights", type=int, default=11)
    par.add_argument("--method", choices=["adjoint", "fd"], default="adjoint")
    par.add_argument("--seed", type=int, default=0)
    par.add_argument("--max-iterations", type=int, default=60)
    par.add_argument("--out", help="front CSV path")
    par.set_defaults(func=_cmd_pareto)
    return parser


def run(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, NetworkValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
