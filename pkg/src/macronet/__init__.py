"""Multi-class macroscopic traffic flow on road networks with exact
adjoint-based control gradients.

The package simulates coupled per-class conservation laws with a
demand/supply Godunov scheme (including merge, diverge and buffered boundary
junctions), evaluates travel-time and travel-distance functionals, and
differentiates them exactly through one backward sweep over the recorded
trajectory. On top sit projected-gradient optimisation, exhaustive grid
studies and weighted-sum Pareto sweeps over time-dependent routing,
priority and speed-limit controls.
"""

from .adjoint import (GradientReport, JacobianBlocks, assemble_control_jacobian,
                      assemble_state_jacobian, class_fraction_derivs, gradient,
                      solve_adjoint)
from .controls import ControlSchedule, default_schedule
from .costs import (Objective, ObjectiveKind, d_cost_du, d_cost_dy,
                    objective_from_sums, objective_value, ttd, ttt)
from .diagram import FundamentalDiagram, Greenshields
from .fd import FDGradient, fd_gradient
from .network import (BoundarySpec, ClassParams, GridSpec, InflowProfile,
                      Junction, JunctionKind, Network, NetworkValidationError,
                      Road, cfl_dt, make_grid, validate, validation_errors)
from .optimize import (GridSearchResult, MinimizeResult, OptimizerConfig,
                       ParetoPoint, grid_search, minimize, pareto_sweep,
                       project_box, project_controls, project_simplex)
from .scenario import (Scenario, ScenarioError, benchmark_scenario,
                       benchmark_start_controls, load_controls, load_scenario,
                       scenario_from_dict, write_bundled_files)
from .simulation import (InvariantViolation, NetworkLayout, Records, State,
                         Trajectory, mass_ledger, simulate,
                         simulate_objectives, step)

__version__ = "0.1.0"
