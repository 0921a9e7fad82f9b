"""Solve-estimate-mark-refine loop with bulk (Doerfler) marking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .estimator import estimate_constrained, estimate_unconstrained
from .mesh import refine_nvb
from .vi_solver import (
    SolverConfig,
    assemble_coupled,
    solution_norms,
    solve_active_set,
    solve_unconstrained,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdaptConfig:
    theta: float = 0.25
    max_dofs: int = 100000
    max_levels: int | None = None
    uniform: bool = False

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("marking parameter theta must lie in (0, 1]")


@dataclass(frozen=True)
class ConvergenceRecord:
    """One adaptive level: dof count, mesh size, indicator and errors."""

    level: int
    n_dofs: int
    h_max: float
    estimate: float
    err_u: float = math.nan
    err_u0: float = math.nan
    err_state: float = math.nan
    err_adjoint: float = math.nan
    iterations: int = 0


@dataclass
class LoopResult:
    records: tuple
    meshes: tuple
    status: str
    last_solution: object = None


def mark_doerfler(indicators, theta):
    """Minimal element set carrying a theta-fraction of the squared indicator.

    Elements are sorted by decreasing indicator (ties broken by lower
    index) and the shortest qualifying prefix is returned.  All-zero
    indicators yield the empty set.
    """
    indicators = np.asarray(indicators, dtype=float)
    if np.any(indicators < 0):
        raise ValueError("indicators must be nonnegative")
    if not 0.0 < theta <= 1.0:
        raise ValueError("marking parameter theta must lie in (0, 1]")
    order = np.argsort(-indicators, kind="stable")
    sorted_vals = indicators[order]
    prefix = np.cumsum(sorted_vals)
    total = prefix[-1] if prefix.size else 0.0
    if total == 0.0:
        return np.empty(0, dtype=int)
    k = int(np.argmax(prefix >= theta * total))
    marked = np.sort(order[: k + 1])
    # minimality: dropping the smallest marked indicator breaks the bound
    if k > 0 and not prefix[k - 1] < theta * total:
        raise AssertionError("bulk marking selected a non-minimal set")
    return marked


def adaptive_loop(problem, mesh, solver_config=None, adapt_config=None, exact=None):
    """Run Solve, Estimate, Mark, Refine until the dof bound is exceeded.

    The solver path follows the constraints: box-constrained problems go
    through the active-set method and the constrained indicator, the rest
    through the single-solve path and the least-squares functional.
    Errors against a manufactured solution are recorded when provided.
    """
    solver_config = solver_config or SolverConfig()
    adapt_config = adapt_config or AdaptConfig()
    constrained = not problem.constraints.unconstrained

    records = []
    meshes = []
    status = "max-dofs"
    solution = None
    level = 0
    while True:
        system = assemble_coupled(problem, mesh, solver_config)
        if constrained:
            solution = solve_active_set(problem, mesh, solver_config, system=system)
            breakdown = estimate_constrained(problem, mesh, solution)
        else:
            solution = solve_unconstrained(problem, mesh, solver_config, system=system)
            breakdown = estimate_unconstrained(problem, mesh, solution)

        errors = {}
        if exact is not None:
            errors = solution_norms(problem, solution, exact)
        record = ConvergenceRecord(
            level=level,
            n_dofs=system.n_physical,
            h_max=float(mesh.edge_lengths().max()),
            estimate=breakdown.estimate,
            err_u=errors.get("err_u", math.nan),
            err_u0=errors.get("err_u0", math.nan),
            err_state=errors.get("err_state", math.nan),
            err_adjoint=errors.get("err_adjoint", math.nan),
            iterations=solution.iterations,
        )
        records.append(record)
        meshes.append(mesh)
        logger.info(
            "level %d: N=%d, h=%.3e, estimate=%.6e, active-set sweeps=%d",
            level, record.n_dofs, record.h_max, record.estimate, record.iterations,
        )

        if adapt_config.max_levels is not None and len(records) >= adapt_config.max_levels:
            status = "max-levels"
            break
        if record.n_dofs > adapt_config.max_dofs:
            status = "max-dofs"
            break

        if adapt_config.uniform:
            marked = np.arange(mesh.n_elements)
        else:
            marked = mark_doerfler(breakdown.element_squares, adapt_config.theta)
            if marked.size == 0:
                status = "quadrature-floor"
                logger.info("all indicators vanish; converged to quadrature floor")
                break
        mesh = refine_nvb(mesh, marked)
        level += 1

    return LoopResult(
        records=tuple(records), meshes=tuple(meshes), status=status, last_solution=solution
    )


def compute_eoc(records, column):
    """Experimental convergence rates with respect to the dof count.

    rate_k = -log(e_{k+1} / e_k) / log(N_{k+1} / N_k); on uniformly
    refined 2D meshes the rate with respect to h is twice this value.
    Pairs with nonpositive or missing values are marked with nan.
    """
    if len(records) < 2:
        return []
    rates = []
    for a, b in zip(records[:-1], records[1:]):
        ea, eb = getattr(a, column), getattr(b, column)
        if not (ea > 0 and eb > 0) or math.isnan(ea) or math.isnan(eb):
            rates.append(math.nan)
            continue
        rates.append(-math.log(eb / ea) / math.log(b.n_dofs / a.n_dofs))
    return rates
