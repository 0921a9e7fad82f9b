"""Elementwise a posteriori error indicators.

For box-constrained solves the indicator combines the squared state and
adjoint least-squares residuals with the mismatch between the computed
control and the clamped control recovered from the discrete adjoint.
For unconstrained solves the least-squares functional itself (with the
control eliminated through the adjoint) is the indicator.  All
contributions are localizable; trace contributions of the space-time
problem are attributed to the owning element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .problems import build_discretization, gather


def box_project(v, lower, upper):
    """Projection onto [lower, upper]; non-expansive, idempotent clamp."""
    if np.any(np.asarray(lower) > np.asarray(upper)):
        raise ValueError("box projection requires lower <= upper")
    return np.minimum(upper, np.maximum(v, lower))


@dataclass
class EstimatorBreakdown:
    """Per-element squared indicator contributions and their global total."""

    element_squares: np.ndarray
    parts: dict
    total_square: float

    @property
    def estimate(self):
        return float(np.sqrt(self.total_square))


def _eval_op(op, coeffs):
    return np.einsum("eqck,ek->eqc", op.values, gather(coeffs, op.dofs), optimize=True)


def _attribute(target, zb, contrib):
    if zb.owners is None:
        target += contrib
    else:
        np.add.at(target, zb.owners, contrib)


def _state_residual_values(disc, zb, x_state, u_groups):
    """Pointwise state residual L y + B u (no data subtracted yet)."""
    if "L" not in zb.ops and not any(k.startswith("B:") for k in zb.ops):
        return None
    r = None
    if "L" in zb.ops:
        r = _eval_op(zb.ops["L"], x_state)
    for key, op in zb.ops.items():
        if key.startswith("B:"):
            term = _eval_op(op, u_groups[key[2:]])
            r = term if r is None else r + term
    return r


def _adjoint_residual_values(disc, zb, x_state, x_adjoint):
    """Pointwise adjoint residual L* p - (observation of y), data excluded."""
    if "Lstar" not in zb.ops and "AI" not in zb.ops:
        return None
    r = None
    if "Lstar" in zb.ops:
        r = _eval_op(zb.ops["Lstar"], x_adjoint)
    if "AI" in zb.ops:
        term = _eval_op(zb.ops["AI"], x_state)
        r = -term if r is None else r - term
    return r


def _trace_mean(disc, vector, coeffs):
    return float(vector @ coeffs) / disc.domain_area


def _apply_rank_one(disc, zb, r, mean_value):
    # the pseudostress residual subtracts (mean trace / d) from the matrix
    # diagonal; flat component order is (00, 01, 10, 11) with d = 2
    if zb.name == "gradient" and mean_value != 0.0:
        r[:, :, 0] -= 0.5 * mean_value
        r[:, :, 3] -= 0.5 * mean_value
    return r


def _utilde_values(disc, solution, clamp):
    """Clamped control candidates -C^{-1} B* I* p_h at quadrature points."""
    layout = solution.system.layout
    x_adjoint = solution.x[layout["adjoint"]]
    out = {}
    for xb in disc.xblocks:
        group = disc.control_group(xb.group)
        pvals = _eval_op(xb.istar, x_adjoint)  # (nent, nq, k)
        cand = -pvals / group.lam
        if clamp:
            k = pvals.shape[2]
            nent = pvals.shape[0]
            lo = group.lower.reshape(k, nent).T[:, None, :]
            hi = group.upper.reshape(k, nent).T[:, None, :]
            cand = box_project(cand, lo, hi)
        out[xb.group] = cand
    return out


def estimate_constrained(problem, mesh, solution):
    """Reliable/efficient indicator for the box-constrained solve."""
    disc = solution.disc
    layout = solution.system.layout
    x_state = solution.x[layout["state"]]
    x_adjoint = solution.x[layout["adjoint"]]
    ne = mesh.n_elements

    mean_state = mean_adj = 0.0
    if disc.rank_one:
        mean_state = _trace_mean(disc, disc.rank_one[0].vector, x_state)
        mean_adj = _trace_mean(disc, disc.rank_one[1].vector, x_adjoint)

    parts = {
        "lsq_state": np.zeros(ne),
        "lsq_adjoint": np.zeros(ne),
        "control_mismatch": np.zeros(ne),
    }
    for zb in disc.zblocks:
        r1 = _state_residual_values(disc, zb, x_state, solution.u)
        if r1 is not None:
            if "f" in zb.data:
                r1 = r1 - zb.data["f"]
            r1 = _apply_rank_one(disc, zb, r1, mean_state)
            _attribute(parts["lsq_state"], zb, np.einsum("eqc,eqc,eq->e", r1, r1, zb.weights))
        r2 = _adjoint_residual_values(disc, zb, x_state, x_adjoint)
        if r2 is not None:
            if "Azd" in zb.data:
                r2 = r2 + zb.data["Azd"]
            r2 = _apply_rank_one(disc, zb, r2, mean_adj)
            _attribute(parts["lsq_adjoint"], zb, np.einsum("eqc,eqc,eq->e", r2, r2, zb.weights))

    utilde = _utilde_values(disc, solution, clamp=True)
    for xb in disc.xblocks:
        group = disc.control_group(xb.group)
        k = utilde[xb.group].shape[2]
        nent = utilde[xb.group].shape[0]
        u_h = solution.u[group.name].reshape(k, nent).T[:, None, :]
        diff = utilde[xb.group] - u_h
        contrib = np.einsum("eqk,eqk,eq->e", diff, diff, xb.weights)
        if nent == ne:
            parts["control_mismatch"] += contrib
        else:  # trace control: attribute to owning elements
            owners = next(zb.owners for zb in disc.zblocks if zb.name == "initial-trace")
            np.add.at(parts["control_mismatch"], owners, contrib)

    element_squares = sum(parts.values())
    return EstimatorBreakdown(
        element_squares=element_squares,
        parts=parts,
        total_square=float(element_squares.sum()),
    )


def estimate_unconstrained(problem, mesh, solution):
    """Least-squares functional as an indicator for the unconstrained solve.

    The control inside the first residual is replaced pointwise by the
    adjoint-recovered control, so the functional depends on the state and
    adjoint pair only.
    """
    disc = solution.disc
    layout = solution.system.layout
    x_state = solution.x[layout["state"]]
    x_adjoint = solution.x[layout["adjoint"]]
    ne = mesh.n_elements
    clamp = not problem.constraints.unconstrained
    utilde = _utilde_values(disc, solution, clamp=clamp)

    mean_state = mean_adj = 0.0
    if disc.rank_one:
        mean_state = _trace_mean(disc, disc.rank_one[0].vector, x_state)
        mean_adj = _trace_mean(disc, disc.rank_one[1].vector, x_adjoint)

    parts = {"lsq_state": np.zeros(ne), "lsq_adjoint": np.zeros(ne)}
    for zb in disc.zblocks:
        r1 = None
        if "L" in zb.ops:
            r1 = _eval_op(zb.ops["L"], x_state)
        for key, op in zb.ops.items():
            if key.startswith("B:"):
                term = np.einsum("eqck,eqk->eqc", op.values, utilde[key[2:]], optimize=True)
                r1 = term if r1 is None else r1 + term
        if r1 is not None:
            if "f" in zb.data:
                r1 = r1 - zb.data["f"]
            r1 = _apply_rank_one(disc, zb, r1, mean_state)
            _attribute(parts["lsq_state"], zb, np.einsum("eqc,eqc,eq->e", r1, r1, zb.weights))
        r2 = _adjoint_residual_values(disc, zb, x_state, x_adjoint)
        if r2 is not None:
            if "Azd" in zb.data:
                r2 = r2 + zb.data["Azd"]
            r2 = _apply_rank_one(disc, zb, r2, mean_adj)
            _attribute(parts["lsq_adjoint"], zb, np.einsum("eqc,eqc,eq->e", r2, r2, zb.weights))

    element_squares = sum(parts.values())
    return EstimatorBreakdown(
        element_squares=element_squares,
        parts=parts,
        total_square=float(element_squares.sum()),
    )


@dataclass
class LeastSquaresQuadratic:
    """Algebraic form of the unconstrained least-squares functional.

    value(x) returns x'Bx + rank-one corrections - 2 m'x + const, which
    equals the quadrature evaluation of the functional exactly (same
    rule on both paths).
    """

    matrix: sp.csr_matrix
    load: np.ndarray
    constant: float
    n_state: int
    rank_one: tuple

    def value(self, x_state, x_adjoint):
        x = np.concatenate([x_state, x_adjoint])
        q = float(x @ (self.matrix @ x))
        for sl, vector, coeff in self.rank_one:
            q += coeff * float(vector @ x[sl]) ** 2
        return q - 2.0 * float(self.load @ x) + self.constant


def assemble_least_squares_functional(problem, mesh, quad_degree=4, disc=None):
    """Gram matrix, load and constant of the eliminated-control functional."""
    disc = disc if disc is not None else build_discretization(problem, mesh, quad_degree)
    n = disc.n_state + disc.n_adjoint
    offsets = {"state": 0, "adjoint": disc.n_state}
    rows_buf, cols_buf, vals_buf = [], [], []
    load = np.zeros(n)
    const = 0.0

    sub_tables = {}
    for xb in disc.xblocks:
        group = disc.control_group(xb.group)
        sub_tables[xb.group] = (-1.0 / group.lam) * xb.istar.values

    def add(op_a_vals, dofs_a, blk_a, op_b_vals, dofs_b, blk_b, w, scale):
        local = scale * np.einsum("eqci,eqcj,eq->eij", op_a_vals, op_b_vals, w, optimize=True)
        rows = np.where(dofs_a >= 0, dofs_a + offsets[blk_a], -1)[:, :, None]
        cols = np.where(dofs_b >= 0, dofs_b + offsets[blk_b], -1)[:, None, :]
        rows = np.broadcast_to(rows, local.shape)
        cols = np.broadcast_to(cols, local.shape)
        mask = (rows >= 0) & (cols >= 0)
        rows_buf.append(rows[mask])
        cols_buf.append(cols[mask])
        vals_buf.append(local[mask])

    def add_load(op_vals, dofs, blk, data, w, scale):
        local = scale * np.einsum("eqci,eqc,eq->ei", op_vals, data, w, optimize=True)
        mask = dofs >= 0
        np.add.at(load, dofs[mask] + offsets[blk], local[mask])

    for zb in disc.zblocks:
        first = []
        if "L" in zb.ops:
            first.append((zb.ops["L"].values, zb.ops["L"].dofs, "state"))
        for key, op in zb.ops.items():
            if key.startswith("B:"):
                composed = np.einsum(
                    "eqzk,eqkl->eqzl", op.values, sub_tables[key[2:]], optimize=True
                )
                first.append((composed, _istar_dofs(disc, key[2:]), "adjoint"))
        second = []
        if "Lstar" in zb.ops:
            second.append((zb.ops["Lstar"].values, zb.ops["Lstar"].dofs, "adjoint", 1.0))
        if "AI" in zb.ops:
            second.append((zb.ops["AI"].values, zb.ops["AI"].dofs, "state", -1.0))

        for va, da, ba in first:
            for vb, db, bb in first:
                add(va, da, ba, vb, db, bb, zb.weights, 1.0)
            if "f" in zb.data:
                add_load(va, da, ba, zb.data["f"], zb.weights, 1.0)
        for va, da, ba, sa in second:
            for vb, db, bb, sb in second:
                add(va, da, ba, vb, db, bb, zb.weights, sa * sb)
            if "Azd" in zb.data:
                add_load(va, da, ba, zb.data["Azd"], zb.weights, -sa)
        if "f" in zb.data:
            const += float(np.einsum("eqc,eqc,eq->", zb.data["f"], zb.data["f"], zb.weights))
        if "Azd" in zb.data:
            const += float(np.einsum("eqc,eqc,eq->", zb.data["Azd"], zb.data["Azd"], zb.weights))

    matrix = sp.coo_matrix(
        (np.concatenate(vals_buf), (np.concatenate(rows_buf), np.concatenate(cols_buf))),
        shape=(n, n),
    ).tocsr()
    rank_one = tuple(
        (slice(offsets["state"], offsets["state"] + disc.n_state)
         if ro.block == "state"
         else slice(offsets["adjoint"], offsets["adjoint"] + disc.n_adjoint),
         ro.vector, ro.coeff)
        for ro in disc.rank_one
    )
    return LeastSquaresQuadratic(
        matrix=matrix, load=load, constant=const, n_state=disc.n_state, rank_one=rank_one
    )


def _istar_dofs(disc, group):
    for xb in disc.xblocks:
        if xb.group == group:
            return xb.istar.dofs
    raise KeyError(group)
