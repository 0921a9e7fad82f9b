"""Least-squares finite elements for distributed optimal control problems."""

from .adaptivity import AdaptConfig, ConvergenceRecord, adaptive_loop, compute_eoc, mark_doerfler
from .estimator import (
    EstimatorBreakdown,
    box_project,
    estimate_constrained,
    estimate_unconstrained,
)
from .mesh import (
    Mesh,
    build_edge_table,
    build_lshape,
    build_rectangle_spacetime,
    build_unit_square,
    mesh_stats,
    refine_nvb,
)
from .problems import (
    ControlConstraints,
    OptimalControlProblem,
    adjoint_identity_check,
    build_discretization,
    diffusion_problem,
    heat_problem,
    stokes_problem,
    unconstrained,
)
from .spaces import (
    DiscreteField,
    DofMap,
    P0_scalar,
    P0_vector,
    RT0,
    RT0_rows,
    S1,
    S1_zero,
    build_dof_map,
    eval_basis,
    project_p0,
    quadrature,
    trace_dofs,
)
from .vi_solver import (
    SolverConfig,
    Solution,
    assemble_coupled,
    solution_norms,
    solve_active_set,
    solve_unconstrained,
)

__version__ = "0.1.0"
