"""Coupled least-squares optimal-control systems and their solvers.

The bilinear form couples the control, state and adjoint unknowns:
a weighted state least-squares term, a weighted adjoint least-squares
term, and the (nonsymmetric) optimality pairing assembled into the
control test rows only.  Box-constrained problems are solved with a
primal-dual active-set iteration; unconstrained problems reduce to one
linear solve, either on the full coupled matrix or after exact static
condensation of the diagonal control block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import linalg
from .problems import build_discretization, gather

logger = logging.getLogger(__name__)


class ActiveSetError(RuntimeError):
    """Raised when the active-set iteration fails to reach a fixpoint."""


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 5.0
    max_active_set_iterations: int = 50
    linear_tol: float = 1e-10
    quad_degree: int = 4

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("least-squares weight gamma must be positive")


@dataclass
class BlockSystem:
    """Assembled coupled matrix and load over ordered blocks.

    Block order: control, state, adjoint, then (heat) the initial
    control.  The pseudostress trace-mean couplings are kept as an exact
    low-rank correction (U, V): the full operator is matrix + U V^T,
    where the sparse base also absorbs a local regularizer that keeps it
    invertible on its own (the correction subtracts it again).
    """

    matrix: linalg.SparseMatrix
    rhs: np.ndarray
    layout: dict
    order: tuple
    n_physical: int
    disc: object
    config: SolverConfig
    low_rank: tuple | None = None  # (U, V) with full operator = matrix + U V^T

    @property
    def n_total(self):
        return self.matrix.shape[0]

    def control_indices(self):
        idx = [np.arange(self.layout[g.name].start, self.layout[g.name].stop)
               for g in self.disc.control_groups]
        return np.concatenate(idx) if idx else np.empty(0, dtype=int)

    def matvec(self, x):
        out = self.matrix @ x
        if self.low_rank is not None:
            U, V = self.low_rank
            out = out + U @ (V.T @ x)
        return out

    def energy(self, x):
        """Value of the bilinear form a(x; x) including rank-one couplings."""
        return float(x @ self.matvec(x))


@dataclass
class ActiveSetState:
    lower_active: np.ndarray
    upper_active: np.ndarray
    iterations: int

    @property
    def n_lower(self):
        return int(self.lower_active.sum())

    @property
    def n_upper(self):
        return int(self.upper_active.sum())


@dataclass
class Solution:
    """Discrete control/state/adjoint triple with solver diagnostics."""

    x: np.ndarray
    u: dict
    state: dict
    adjoint: dict
    iterations: int
    linear_residual: float
    system: BlockSystem
    active: ActiveSetState | None = None
    multiplier: np.ndarray | None = None
    vi_margin: float | None = None

    @property
    def disc(self):
        return self.system.disc


def _add_gram(buf, op_test, op_trial, weights, layout, scale):
    if scale == 0.0:
        return
    local = scale * np.einsum(
        "eqci,eqcj,eq->eij", op_test.values, op_trial.values, weights, optimize=True
    )
    ni, nj = local.shape[1], local.shape[2]
    rows = op_test.dofs[:, :, None] + 0
    cols = op_trial.dofs[:, None, :] + 0
    rows = np.where(rows >= 0, rows + layout[op_test.block].start, -1)
    cols = np.where(cols >= 0, cols + layout[op_trial.block].start, -1)
    rows = np.broadcast_to(rows, local.shape)
    cols = np.broadcast_to(cols, local.shape)
    mask = (rows >= 0) & (cols >= 0)
    buf.add(rows[mask], cols[mask], local[mask])


def _add_load(rhs, op_test, data, weights, layout, scale):
    if scale == 0.0:
        return
    local = scale * np.einsum("eqci,eqc,eq->ei", op_test.values, data, weights, optimize=True)
    dofs = op_test.dofs
    mask = dofs >= 0
    np.add.at(rhs, dofs[mask] + layout[op_test.block].start, local[mask])


def block_layout(disc):
    """Block order [u | state | adjoint | u0 | aux] with global slices."""
    order = []
    sizes = []
    for g in disc.control_groups:
        if g.name != "u0":
            order.append(g.name)
            sizes.append(g.n_dofs)
    order += ["state", "adjoint"]
    sizes += [disc.n_state, disc.n_adjoint]
    for g in disc.control_groups:
        if g.name == "u0":
            order.append(g.name)
            sizes.append(g.n_dofs)
    n_physical = int(sum(sizes))
    layout = {}
    start = 0
    for name, size in zip(order, sizes):
        layout[name] = slice(start, start + size)
        start += size
    return tuple(order), layout, n_physical, start


def assemble_coupled(problem, mesh, config=None, disc=None):
    """Assemble the coupled matrix and load of the optimality system."""
    config = config or SolverConfig()
    disc = disc if disc is not None else build_discretization(problem, mesh, config.quad_degree)
    order, layout, n_physical, n_total = block_layout(disc)
    gamma = config.gamma

    buf = linalg.TripletBuffer()
    rhs = np.zeros(n_total)

    for zb in disc.zblocks:
        first = [op for key, op in zb.ops.items() if key == "L" or key.startswith("B:")]
        for op_test in first:
            for op_trial in first:
                _add_gram(buf, op_test, op_trial, zb.weights, layout, gamma)
            if "f" in zb.data:
                _add_load(rhs, op_test, zb.data["f"], zb.weights, layout, gamma)
        second = [(zb.ops[key], sign) for key, sign in (("Lstar", 1.0), ("AI", -1.0))
                  if key in zb.ops]
        for op_test, s_test in second:
            for op_trial, s_trial in second:
                _add_gram(buf, op_test, op_trial, zb.weights, layout, gamma * s_test * s_trial)
            if "Azd" in zb.data:
                _add_load(rhs, op_test, zb.data["Azd"], zb.weights, layout, -gamma * s_test)

    for xb in disc.xblocks:
        group = disc.control_group(xb.group)
        _add_gram(buf, xb.ctrl, xb.istar, xb.weights, layout, 1.0)
        _add_gram(buf, xb.ctrl, xb.ctrl, xb.weights, layout, group.lam)

    # pseudostress trace-mean couplings: gamma*coeff*(t.x) t is kept as a
    # low-rank correction U V^T around a sparse base.  The base absorbs a
    # local surrogate (one element's trace functional, rescaled) so that
    # it is invertible by itself; the correction removes it again.
    low_rank = None
    if disc.rank_one:
        cols_u, cols_v = [], []
        for ro in disc.rank_one:
            blk = layout[ro.block]
            t_full = np.zeros(n_total)
            t_full[blk] = ro.vector
            t_loc = np.zeros(n_total)
            dofs, vals = ro.dofs[0], ro.local[0]
            keep = dofs >= 0
            scale = disc.domain_area / float(np.abs(vals[keep]).sum() + 1e-300)
            t_loc[blk.start + dofs[keep]] = vals[keep] * scale
            c = gamma * ro.coeff
            idx = blk.start + dofs[keep]
            local_block = c * np.outer(vals[keep] * scale, vals[keep] * scale)
            buf.add(np.repeat(idx, idx.size), np.tile(idx, idx.size), local_block.ravel())
            cols_u.extend([c * t_full, -c * t_loc])
            cols_v.extend([t_full, t_loc])
        low_rank = (np.column_stack(cols_u), np.column_stack(cols_v))

    matrix = linalg.assemble(n_total, n_total, buf)
    return BlockSystem(
        matrix=matrix,
        rhs=rhs,
        layout=layout,
        order=order,
        n_physical=n_physical,
        disc=disc,
        config=config,
        low_rank=low_rank,
    )


def _split_solution(system, x, **kw):
    disc = system.disc
    u = {g.name: x[system.layout[g.name]].copy() for g in disc.control_groups}
    xs = x[system.layout["state"]]
    xa = x[system.layout["adjoint"]]
    state = {name: xs[off : off + dm.n_dofs].copy() for name, dm, off in disc.state_parts}
    adjoint = {name: xa[off : off + dm.n_dofs].copy() for name, dm, off in disc.adjoint_parts}
    residual = float(
        np.linalg.norm(system.matvec(x) - system.rhs)
        / max(np.linalg.norm(system.rhs), 1e-300)
    )
    return Solution(
        x=x, u=u, state=state, adjoint=adjoint, linear_residual=residual, system=system, **kw
    )


def solve_unconstrained(problem, mesh, config=None, method="coupled", system=None):
    """Solve the unconstrained coupled optimality system in one linear solve.

    method="coupled" factorizes the full block matrix; "elimination"
    first condenses the (diagonal) control block onto the state/adjoint
    unknowns and recovers the control afterwards.  Both paths realize
    the same discrete minimizer and agree to solver precision.
    """
    config = config or SolverConfig()
    if not problem.constraints.unconstrained:
        raise ValueError("problem has box constraints; use solve_active_set")
    system = system if system is not None else assemble_coupled(problem, mesh, config)
    if method == "coupled":
        x = _linear_solve(system, system.matrix.csr, system.rhs)
    elif method == "elimination":
        x = _solve_condensed(system, config)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _split_solution(system, x, iterations=0)


def _linear_solve(system, base, rhs, restrict=None):
    """Solve (base + restricted low-rank) x = rhs for a block system."""
    if system.low_rank is None:
        return linalg.solve(base, rhs, tol=system.config.linear_tol,
                            block_names=system.order)
    U, V = system.low_rank
    if restrict is not None:
        U, V = U[restrict], V[restrict]
    return linalg.solve_low_rank(base, U, V, rhs, tol=system.config.linear_tol,
                                 block_names=system.order)


def _solve_condensed(system, config):
    K = system.matrix.csr
    n = system.n_total
    cidx = system.control_indices()
    rmask = np.ones(n, dtype=bool)
    rmask[cidx] = False
    ridx = np.flatnonzero(rmask)

    Kcc = K[cidx][:, cidx].tocsr()
    off_diagonal = Kcc - sp.diags(Kcc.diagonal())
    if off_diagonal.nnz and np.max(np.abs(off_diagonal.data)) > 1e-14:
        raise linalg.LinearSolveError("control block is not diagonal; condensation invalid")
    d = Kcc.diagonal()
    Kcr = K[cidx][:, ridx].tocsr()
    Krc = K[ridx][:, cidx].tocsr()
    Krr = K[ridx][:, ridx].tocsr()

    rhs_c = system.rhs[cidx]
    rhs_r = system.rhs[ridx] - Krc @ (rhs_c / d)
    schur = (Krr - Krc @ sp.diags(1.0 / d) @ Kcr).tocsr()
    # the low-rank correction vanishes on control rows/columns, so it
    # restricts verbatim to the condensed index set
    x_r = _linear_solve(system, schur, rhs_r, restrict=ridx)
    x = np.zeros(n)
    x[ridx] = x_r
    x[cidx] = (rhs_c - Kcr @ x_r) / d
    return x


def solve_active_set(problem, mesh, config=None, system=None):
    """Primal-dual active-set solve of a box-constrained coupled system.

    Starting from the all-inactive configuration, each sweep imposes the
    bound values on the active sets (identity rows), solves the reduced
    system, recovers the multiplier as the control-row residual of the
    full equations, and updates the sets; it stops when they no longer
    change.
    """
    config = config or SolverConfig()
    system = system if system is not None else assemble_coupled(problem, mesh, config)
    disc = system.disc

    cidx = system.control_indices()
    lower = np.concatenate([g.lower for g in disc.control_groups])
    upper = np.concatenate([g.upper for g in disc.control_groups])
    if np.all(np.isinf(lower)) and np.all(np.isinf(upper)):
        raise ValueError("no finite control bound; use solve_unconstrained")
    cdiag = np.concatenate(
        [(config.gamma + g.lam) * g.measures for g in disc.control_groups]
    )

    K = system.matrix.csr
    coo = K.tocoo()
    lower_active = np.zeros(cidx.size, dtype=bool)
    upper_active = np.zeros(cidx.size, dtype=bool)

    x = None
    for iteration in range(1, config.max_active_set_iterations + 1):
        active = lower_active | upper_active
        if not active.any():
            K_it, rhs_it = K, system.rhs
        else:
            act_global = cidx[active]
            keep = ~np.isin(coo.row, act_global)
            rows = np.concatenate([coo.row[keep], act_global])
            cols = np.concatenate([coo.col[keep], act_global])
            vals = np.concatenate([coo.data[keep], np.ones(act_global.size)])
            K_it = sp.coo_matrix((vals, (rows, cols)), shape=K.shape).tocsr()
            rhs_it = system.rhs.copy()
            rhs_it[cidx[lower_active]] = lower[lower_active]
            rhs_it[cidx[upper_active]] = upper[upper_active]
        x = _linear_solve(system, K_it, rhs_it)

        mu = (system.rhs - system.matvec(x))[cidx]
        u = x[cidx]
        indicator = u + mu / cdiag
        new_lower = indicator < lower
        new_upper = indicator > upper
        if np.array_equal(new_lower, lower_active) and np.array_equal(new_upper, upper_active):
            break
        lower_active, upper_active = new_lower, new_upper
    else:
        raise ActiveSetError(
            "active-set iteration did not reach a fixpoint in "
            f"{config.max_active_set_iterations} sweeps "
            f"(last sizes: lower {int(lower_active.sum())}, upper {int(upper_active.sum())})"
        )

    # clamp active dofs to the exact bound values
    x[cidx[lower_active]] = lower[lower_active]
    x[cidx[upper_active]] = upper[upper_active]
    mu = (system.rhs - system.matvec(x))[cidx]
    u = x[cidx]

    # variational-inequality margin at the per-dof extreme points
    margins = []
    res = -mu
    finite_lo = np.isfinite(lower)
    finite_hi = np.isfinite(upper)
    if finite_lo.any():
        margins.append((res * (lower - u))[finite_lo])
    if finite_hi.any():
        margins.append((res * (upper - u))[finite_hi])
    vi_margin = float(np.min(np.concatenate(margins))) if margins else 0.0

    state = ActiveSetState(lower_active, upper_active, iteration)
    return _split_solution(
        system, x, iterations=iteration, active=state, multiplier=mu, vi_margin=vi_margin
    )


def coercivity_samples(system, n_samples=50, seed=20210405):
    """Values of a(x; x) for random unit coefficient vectors."""
    rng = np.random.default_rng(seed)
    out = np.empty(n_samples)
    for k in range(n_samples):
        x = rng.standard_normal(system.n_physical)
        x /= np.linalg.norm(x)
        out[k] = system.energy(x)
    return out


# ---------------------------------------------------------------------------
# error norms against manufactured solutions


def _cell_values(hats, coeffs_elem):
    return np.einsum("ej,eqj->eq", coeffs_elem, hats)


def solution_norms(problem, solution, exact):
    """Errors of the discrete solution in the graph norms of its spaces.

    Returns a dict with err_u, err_u0 (heat only), err_state and
    err_adjoint; quantities that do not apply are absent.
    """
    disc = solution.disc
    geom = disc.geom
    w = geom["weights"]
    pts = geom["points"]
    flat = pts.reshape(-1, 2)
    kind = problem.kind

    if kind == "diffusion_reaction_convection":
        return _norms_diffusion(disc, solution, exact, w, pts, flat)
    if kind == "stokes_pseudostress":
        return _norms_stokes(disc, solution, exact, w, pts, flat)
    if kind == "heat_space_time":
        return _norms_heat(disc, solution, exact, w, pts, flat)
    raise ValueError(kind)


def _norms_diffusion(disc, solution, exact, w, pts, flat):
    mesh = disc.mesh
    ne = mesh.n_elements
    nq = w.shape[1]
    grads = disc.geom["grads"]
    psi = disc.geom["psi"]
    rtdiv = disc.geom["rtdiv"]
    ymap = disc.state_parts[0][1]

    def field_errors(y_coef, s_coef, grad_ex, sig_ex, div_ex):
        ye = gather(y_coef, ymap.element_dofs)
        grad_h = np.einsum("ej,ejd->ed", ye, grads)
        sig_h = np.einsum("ej,eqjd->eqd", s_coef[disc.edge_table.elem_to_edge], psi)
        div_h = np.einsum("ej,ej->e", s_coef[disc.edge_table.elem_to_edge], rtdiv)
        e_grad = grad_ex.reshape(ne, nq, 2) - grad_h[:, None, :]
        e_sig = sig_ex.reshape(ne, nq, 2) - sig_h
        e_div = div_ex.reshape(ne, nq) - div_h[:, None]
        return float(
            np.sum(w * (np.sum(e_grad**2, -1) + np.sum(e_sig**2, -1) + e_div**2))
        )

    err_state = field_errors(
        solution.state["y"], solution.state["sigma"],
        exact.grad_y(flat), exact.sigma(flat), exact.div_sigma(flat),
    )
    err_adjoint = field_errors(
        solution.adjoint["p"], solution.adjoint["xi"],
        exact.grad_p(flat), exact.xi(flat), exact.div_xi(flat),
    )
    u_ex = exact.u(flat).reshape(ne, nq)
    err_u = float(np.sum(w * (u_ex - solution.u["u"][:, None]) ** 2))
    return {
        "err_u": np.sqrt(err_u),
        "err_state": np.sqrt(err_state),
        "err_adjoint": np.sqrt(err_adjoint),
    }


def _norms_stokes(disc, solution, exact, w, pts, flat):
    mesh = disc.mesh
    ne = mesh.n_elements
    nq = w.shape[1]
    grads = disc.geom["grads"]
    psi = disc.geom["psi"]
    rtdiv = disc.geom["rtdiv"]
    ymap = disc.state_parts[0][1]
    e2e = disc.edge_table.elem_to_edge
    n_edges = disc.edge_table.n_edges

    def field_errors(y_coef, m_coef, grad_ex, m_ex, divm_ex):
        # ymap.element_dofs is component-major over 6 locals
        ye = np.stack(
            [gather(y_coef, ymap.element_dofs[:, 3 * c : 3 * c + 3]) for c in range(2)],
            axis=1,
        )  # (ne, 2, 3)
        grad_h = np.einsum("ecj,ejd->ecd", ye, grads)  # (ne, 2, 2)
        m_rows = np.stack([m_coef[c * n_edges : (c + 1) * n_edges][e2e] for c in range(2)], 1)
        m_h = np.einsum("erj,eqjd->eqrd", m_rows, psi)  # (ne, nq, 2, 2)
        divm_h = np.einsum("erj,ej->er", m_rows, rtdiv)
        e_grad = grad_ex.reshape(ne, nq, 2, 2) - grad_h[:, None, :, :]
        e_m = m_ex.reshape(ne, nq, 2, 2) - m_h
        e_div = divm_ex.reshape(ne, nq, 2) - divm_h[:, None, :]
        return float(
            np.sum(
                w
                * (
                    np.sum(e_grad**2, (-2, -1))
                    + np.sum(e_m**2, (-2, -1))
                    + np.sum(e_div**2, -1)
                )
            )
        )

    err_state = field_errors(
        solution.state["y"], solution.state["M"],
        exact.grad_y(flat), exact.M(flat), exact.div_M(flat),
    )
    err_adjoint = field_errors(
        solution.adjoint["p"], solution.adjoint["N"],
        exact.grad_p(flat), exact.N(flat), exact.div_N(flat),
    )
    u_ex = exact.u(flat).reshape(ne, nq, 2)
    u_h = np.stack([solution.u["u"][:ne], solution.u["u"][ne:]], axis=1)
    err_u = float(np.sum(w * np.sum((u_ex - u_h[:, None, :]) ** 2, -1)))
    return {
        "err_u": np.sqrt(err_u),
        "err_state": np.sqrt(err_state),
        "err_adjoint": np.sqrt(err_adjoint),
    }


def _norms_heat(disc, solution, exact, w, pts, flat):
    mesh = disc.mesh
    ne = mesh.n_elements
    nq = w.shape[1]
    grads = disc.geom["grads"]
    hats = disc.geom["hats"]
    ymap = disc.state_parts[0][1]
    smap = disc.state_parts[1][1]

    def field_errors(y_coef, s_coef, dt_ex, dx_ex, s_ex, sx_ex, adjoint):
        ye = gather(y_coef, ymap.element_dofs)
        se = s_coef[smap.element_dofs]
        grad_y_h = np.einsum("ej,ejd->ed", ye, grads)  # (ne, 2): (d/dt, d/dx)
        s_h = np.einsum("ej,eqj->eq", se, hats)
        grad_s_h = np.einsum("ej,ejd->ed", se, grads)
        e_dx = dx_ex.reshape(ne, nq) - grad_y_h[:, 1][:, None]
        e_s = s_ex.reshape(ne, nq) - s_h
        sgn = 1.0 if adjoint else -1.0
        graph_ex = dt_ex.reshape(ne, nq) + sgn * sx_ex.reshape(ne, nq)
        graph_h = grad_y_h[:, 0][:, None] + sgn * grad_s_h[:, 1][:, None]
        e_graph = graph_ex - graph_h
        return float(np.sum(w * (e_dx**2 + e_s**2 + e_graph**2)))

    err_state = field_errors(
        solution.state["y"], solution.state["sigma"],
        exact.dy_dt(flat), exact.dy_dx(flat), exact.sigma(flat), exact.div_sigma(flat),
        adjoint=False,
    )
    err_adjoint = field_errors(
        solution.adjoint["p"], solution.adjoint["xi"],
        exact.dp_dt(flat), exact.dp_dx(flat), exact.xi(flat), exact.div_xi(flat),
        adjoint=True,
    )
    u_ex = exact.u(flat).reshape(ne, nq)
    err_u = float(np.sum(w * (u_ex - solution.u["u"][:, None]) ** 2))
    out = {
        "err_u": np.sqrt(err_u),
        "err_state": np.sqrt(err_state),
        "err_adjoint": np.sqrt(err_adjoint),
    }
    if "u0" in solution.u:
        tr = disc.geom["trace0"]
        x_q = tr["points"][:, :, 1]
        u0_ex = exact.u0(x_q.reshape(-1)).reshape(x_q.shape)
        err_u0 = float(np.sum(tr["weights"] * (u0_ex - solution.u["u0"][:, None]) ** 2))
        out["err_u0"] = np.sqrt(err_u0)
    return out
