"""Concrete optimal-control operator families as per-element residual tables.

Three problem kinds are supported:

* ``diffusion_reaction_convection`` -- first-order reformulation of a
  scalar second-order PDE; state pair (y, sigma) in S1_0 x RT0.
* ``stokes_pseudostress`` -- Stokes flow with the pseudostress tensor;
  state pair (y, M) in (S1_0)^2 x rowwise RT0, with the global
  trace-mean coupling kept as an exact rank-one term.
* ``heat_space_time`` -- heat equation on a 2D space-time mesh (t, x);
  all four scalar fields are continuous piecewise linears, the state and
  adjoint carry trace components on the initial/final time lines.

For every Lebesgue component of the residual space the builder tabulates
the action of the operators (state residual, adjoint residual, control
embedding, observation, identity embeddings) on the local bases at
quadrature points.  Assembly, error estimation and norm evaluation all
consume these tables.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import (
    DIRICHLET,
    FINAL_TIME,
    INITIAL_TIME,
    SPATIAL_BOUNDARY,
    build_edge_table,
)
from .spaces import (
    RT0,
    RT0_rows,
    S1,
    S1_zero,
    S1_zero_vector,
    build_dof_map,
    gauss_segment,
    hat_gradients,
    physical_points,
    quadrature,
    rt0_divergences,
    rt0_values,
    trace_dofs,
)

logger = logging.getLogger(__name__)

DIFFUSION = "diffusion_reaction_convection"
STOKES = "stokes_pseudostress"
HEAT = "heat_space_time"


@dataclass(frozen=True)
class ControlConstraints:
    """Box bounds on the control; infinite bounds mean unconstrained.

    For the space-time heat problem, (lower0, upper0) bound the initial
    control.  Vector-valued controls accept per-component tuples.
    """

    lower: object = -math.inf
    upper: object = math.inf
    lower0: float = -math.inf
    upper0: float = math.inf

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if np.any(lo >= hi):
            raise ValueError("control bounds require lower < upper componentwise")
        if self.lower0 >= self.upper0:
            raise ValueError("initial-control bounds require lower0 < upper0")

    @property
    def unconstrained(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        return (
            bool(np.all(np.isinf(lo)) and np.all(np.isinf(hi)))
            and math.isinf(self.lower0)
            and math.isinf(self.upper0)
        )


def unconstrained():
    return ControlConstraints()


@dataclass
class OptimalControlProblem:
    """Problem data: operator coefficients, loads, targets and control cost.

    Domain data callbacks are vectorized over point arrays of shape
    (n, 2); for the heat kind the two columns are (t, x) and the trace
    data y0, z_dT take the 1D spatial coordinate.
    """

    kind: str
    lam: float
    constraints: ControlConstraints
    f: object = None
    z_d: object = None
    f_vec: object = None
    coeff_A: object = None
    coeff_b: object = None
    coeff_c: object = None
    lam0: float = 0.0
    y0: object = None
    z_dT: object = None

    def __post_init__(self):
        if self.kind not in (DIFFUSION, STOKES, HEAT):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if not self.lam > 0:
            raise ValueError("control cost lam must be positive")
        if self.lam0 < 0:
            raise ValueError("initial-control cost lam0 must be nonnegative")

    @property
    def has_initial_control(self):
        return self.kind == HEAT and self.lam0 > 0


def diffusion_problem(f, z_d, lam, constraints=None, f_vec=None, A=None, b=None, c=None):
    return OptimalControlProblem(
        kind=DIFFUSION,
        lam=lam,
        constraints=constraints or unconstrained(),
        f=f,
        z_d=z_d,
        f_vec=f_vec,
        coeff_A=A,
        coeff_b=b,
        coeff_c=c,
    )


def stokes_problem(f, z_d, lam, constraints=None):
    return OptimalControlProblem(
        kind=STOKES, lam=lam, constraints=constraints or unconstrained(), f=f, z_d=z_d
    )


def heat_problem(f, z_d, y0, z_dT, lam, lam0, constraints=None):
    return OptimalControlProblem(
        kind=HEAT,
        lam=lam,
        constraints=constraints or unconstrained(),
        f=f,
        z_d=z_d,
        lam0=lam0,
        y0=y0,
        z_dT=z_dT,
    )


# ---------------------------------------------------------------------------
# residual tables


@dataclass
class OpTable:
    """Basis-operator values: (n_entities, n_quad, n_components, n_local)."""

    values: np.ndarray
    dofs: np.ndarray  # (n_entities, n_local) block-relative dofs, -1 constrained
    block: str  # "state", "adjoint" or a control-group name


@dataclass
class ZBlock:
    """One Lebesgue component of the residual space.

    Cell blocks integrate over elements; trace blocks over the segments
    of a labelled boundary line (owners gives the owning element of each
    segment, used to attribute error indicators).
    """

    name: str
    ncomp: int
    weights: np.ndarray  # (n_entities, n_quad)
    ops: dict = field(default_factory=dict)  # op name -> OpTable
    data: dict = field(default_factory=dict)  # data name -> (n_ent, n_quad, ncomp)
    owners: np.ndarray | None = None  # trace blocks only


@dataclass
class XBlock:
    """Duality pairing block in the control space."""

    group: str
    weights: np.ndarray
    ctrl: OpTable
    istar: OpTable


@dataclass
class ControlGroup:
    name: str
    n_dofs: int
    dofs: np.ndarray  # (n_entities, k)
    measures: np.ndarray  # (n_dofs,)
    lam: float
    lower: np.ndarray  # (n_dofs,)
    upper: np.ndarray


@dataclass
class RankOne:
    """Exact global coupling v -> coeff * (t . v_block) t arising from the
    projection of the pseudostress trace onto constants.

    `local` and `dofs` hold the per-element contributions of t, so the
    assembly can realize the global sum as a sparse running-sum chain
    instead of a dense matrix row.
    """

    block: str
    vector: np.ndarray
    coeff: float
    local: np.ndarray
    dofs: np.ndarray


@dataclass
class Discretization:
    problem: OptimalControlProblem
    mesh: object
    edge_table: object
    quad_degree: int
    state_parts: tuple  # ((name, DofMap, offset), ...)
    adjoint_parts: tuple
    n_state: int
    n_adjoint: int
    state_elem_dofs: np.ndarray
    adjoint_elem_dofs: np.ndarray
    control_groups: tuple
    zblocks: tuple
    xblocks: tuple
    rank_one: tuple
    domain_area: float
    geom: dict

    def control_group(self, name):
        for g in self.control_groups:
            if g.name == name:
                return g
        raise KeyError(name)


def gather(coefficients, dofs):
    """Coefficient lookup treating dof -1 as a homogeneous constraint."""
    ext = np.append(coefficients, 0.0)
    idx = np.where(dofs >= 0, dofs, coefficients.shape[0])
    return ext[idx]


def _broadcast_bounds(value, n_dofs, components):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        return np.full(n_dofs, arr[0])
    if arr.size == components:
        return np.repeat(arr, n_dofs // components)
    raise ValueError("bounds must be scalar or one value per control component")


def _eval(fn, pts):
    return np.asarray(fn(pts.reshape(-1, 2)), dtype=float)


def _trace_geometry(mesh, label, edge_table, grads, n_gauss=3):
    """1D quadrature data for a labelled boundary line.

    Returns segments ordered along the line with owner elements, physical
    quadrature weights, quadrature points, and the owner-element hat
    values at those points.
    """
    s1map = build_dof_map(mesh, S1())
    trace = trace_dofs(mesh, s1map, label, edge_table)
    x1, w1 = gauss_segment(n_gauss)
    if trace.n_segments == 0:
        return trace, np.empty((0, x1.size)), np.empty((0, x1.size, 2)), np.empty((0, x1.size, 3))
    p0 = mesh.vertices[trace.segments[:, 0]]
    p1 = mesh.vertices[trace.segments[:, 1]]
    pts = p0[:, None, :] + x1[None, :, None] * (p1 - p0)[:, None, :]
    weights = trace.lengths[:, None] * w1[None, :]

    # barycentric coordinates w.r.t. the owning element via its hat gradients:
    # lam_i(x) = lam_i(v0) + grad lam_i . (x - v0)
    owners = trace.owners
    v0 = mesh.vertices[mesh.elements[owners, 0]]
    g = grads[owners]  # (ns, 3, 2)
    rel = pts - v0[:, None, :]
    hat = np.einsum("sid,sqd->sqi", g, rel)
    hat[:, :, 0] += 1.0
    return trace, weights, pts, hat


def _build_diffusion(problem, mesh, quad_degree):
    table = build_edge_table(mesh)
    rule = quadrature(quad_degree)
    nq = rule.weights.size
    ne = mesh.n_elements
    areas = mesh.areas()
    weights = 2.0 * areas[:, None] * rule.weights[None, :]
    pts = physical_points(mesh, rule)
    lam_q = rule.points  # (nq, 3) hat values
    grads = hat_gradients(mesh)
    ymap = build_dof_map(mesh, S1_zero({DIRICHLET}))
    smap = build_dof_map(mesh, RT0(), table)
    psi = rt0_values(mesh, smap, pts)
    div = rt0_divergences(mesh, smap)

    n_state = ymap.n_dofs + smap.n_dofs
    sig_dofs = smap.element_dofs + ymap.n_dofs
    state_dofs = np.hstack([ymap.element_dofs, sig_dofs])

    c_q = _eval(problem.coeff_c, pts).reshape(ne, nq) if problem.coeff_c else None
    if c_q is not None and c_q.min() < 0:
        logger.warning("reaction coefficient c < 0: well-posedness unchecked")
    b_q = _eval(problem.coeff_b, pts).reshape(ne, nq, 2) if problem.coeff_b else None
    if problem.coeff_A:
        A_q = _eval(problem.coeff_A, pts).reshape(ne, nq, 2, 2)
        Ainv_psi = np.einsum("eqab,eqjb->eqja", np.linalg.inv(A_q), psi)
    else:
        Ainv_psi = psi

    hats = np.broadcast_to(lam_q[None, :, :], (ne, nq, 3))  # (ne, nq, 3)

    # component "pde": div sigma + c y  /  -div xi - b.xi + c p
    L_pde = np.zeros((ne, nq, 1, 6))
    if c_q is not None:
        L_pde[:, :, 0, 0:3] = c_q[:, :, None] * hats
    L_pde[:, :, 0, 3:6] = div[:, None, :]
    Ls_pde = np.zeros((ne, nq, 1, 6))
    if c_q is not None:
        Ls_pde[:, :, 0, 0:3] = c_q[:, :, None] * hats
    Ls_pde[:, :, 0, 3:6] = -div[:, None, :]
    if b_q is not None:
        Ls_pde[:, :, 0, 3:6] -= np.einsum("eqd,eqjd->eqj", b_q, psi)
    B_pde = np.full((ne, nq, 1, 1), -1.0)
    AI_pde = np.zeros((ne, nq, 1, 6))
    AI_pde[:, :, 0, 0:3] = hats
    Istar_pde = AI_pde

    # component "flux": grad y - b y + A^-1 sigma  /  -grad p + A^-1 xi
    L_flux = np.zeros((ne, nq, 2, 6))
    L_flux[:, :, :, 0:3] = np.moveaxis(grads, 1, 2)[:, None, :, :]
    if b_q is not None:
        L_flux[:, :, :, 0:3] -= b_q[:, :, :, None] * hats[:, :, None, :]
    L_flux[:, :, :, 3:6] = np.moveaxis(Ainv_psi, 2, 3)
    Ls_flux = L_flux.copy()
    Ls_flux[:, :, :, 0:3] = -np.moveaxis(grads, 1, 2)[:, None, :, :]
    I_flux = np.zeros((ne, nq, 2, 6))
    I_flux[:, :, :, 3:6] = np.moveaxis(psi, 2, 3)

    z_pde = ZBlock(name="pde", ncomp=1, weights=weights)
    z_pde.ops["L"] = OpTable(L_pde, state_dofs, "state")
    z_pde.ops["Lstar"] = OpTable(Ls_pde, state_dofs, "adjoint")
    z_pde.ops["B:u"] = OpTable(B_pde, np.arange(ne)[:, None], "u")
    z_pde.ops["AI"] = OpTable(AI_pde, state_dofs, "state")
    z_pde.ops["I"] = OpTable(AI_pde, state_dofs, "state")
    z_pde.ops["Istar"] = OpTable(Istar_pde, state_dofs, "adjoint")
    if problem.f is not None:
        z_pde.data["f"] = _eval(problem.f, pts).reshape(ne, nq, 1)
    if problem.z_d is not None:
        z_pde.data["Azd"] = _eval(problem.z_d, pts).reshape(ne, nq, 1)

    z_flux = ZBlock(name="flux", ncomp=2, weights=weights)
    z_flux.ops["L"] = OpTable(L_flux, state_dofs, "state")
    z_flux.ops["Lstar"] = OpTable(Ls_flux, state_dofs, "adjoint")
    z_flux.ops["I"] = OpTable(I_flux, state_dofs, "state")
    z_flux.ops["Istar"] = OpTable(I_flux, state_dofs, "adjoint")
    if problem.f_vec is not None:
        z_flux.data["f"] = _eval(problem.f_vec, pts).reshape(ne, nq, 2)

    ctrl = OpTable(np.ones((ne, nq, 1, 1)), np.arange(ne)[:, None], "u")
    xb = XBlock(group="u", weights=weights, ctrl=ctrl, istar=OpTable(Istar_pde, state_dofs, "adjoint"))

    cc = problem.constraints
    group = ControlGroup(
        name="u",
        n_dofs=ne,
        dofs=np.arange(ne)[:, None],
        measures=areas.copy(),
        lam=problem.lam,
        lower=_broadcast_bounds(cc.lower, ne, 1),
        upper=_broadcast_bounds(cc.upper, ne, 1),
    )

    geom = {
        "rule": rule,
        "areas": areas,
        "weights": weights,
        "points": pts,
        "hats": hats,
        "grads": grads,
        "psi": psi,
        "rtdiv": div,
    }
    return Discretization(
        problem=problem,
        mesh=mesh,
        edge_table=table,
        quad_degree=quad_degree,
        state_parts=(("y", ymap, 0), ("sigma", smap, ymap.n_dofs)),
        adjoint_parts=(("p", ymap, 0), ("xi", smap, ymap.n_dofs)),
        n_state=n_state,
        n_adjoint=n_state,
        state_elem_dofs=state_dofs,
        adjoint_elem_dofs=state_dofs,
        control_groups=(group,),
        zblocks=(z_pde, z_flux),
        xblocks=(xb,),
        rank_one=(),
        domain_area=float(areas.sum()),
        geom=geom,
    )


def _build_stokes(problem, mesh, quad_degree):
    table = build_edge_table(mesh)
    rule = quadrature(quad_degree)
    nq = rule.weights.size
    ne = mesh.n_elements
    areas = mesh.areas()
    weights = 2.0 * areas[:, None] * rule.weights[None, :]
    pts = physical_points(mesh, rule)
    hats = np.broadcast_to(rule.points[None, :, :], (ne, nq, 3))
    grads = hat_gradients(mesh)
    ymap = build_dof_map(mesh, S1_zero_vector({DIRICHLET}, 2))
    mmap = build_dof_map(mesh, RT0_rows(2), table)
    scalar_map = build_dof_map(mesh, RT0(), table)
    psi = rt0_values(mesh, scalar_map, pts)  # (ne, nq, 3, 2)
    div = rt0_divergences(mesh, scalar_map)

    n_state = ymap.n_dofs + mmap.n_dofs
    state_dofs = np.hstack(
        [ymap.element_dofs, np.where(mmap.element_dofs >= 0, mmap.element_dofs + ymap.n_dofs, -1)]
    )

    # local layout: y-components c*3+i (c = 0, 1), then rows r*3+j of M
    # component "momentum" (2 components): -div M
    L_mom = np.zeros((ne, nq, 2, 12))
    for r in range(2):
        L_mom[:, :, r, 6 + 3 * r : 9 + 3 * r] = -div[:, None, :]
    B_mom = np.zeros((ne, nq, 2, 2))
    for c in range(2):
        B_mom[:, :, c, c] = -1.0
    AI_mom = np.zeros((ne, nq, 2, 12))
    for c in range(2):
        AI_mom[:, :, c, 3 * c : 3 * c + 3] = hats
    Istar_mom = AI_mom

    # component "gradient" (4 components, row-major flattening 00, 01, 10, 11):
    # grad y - Dev M (the constant-trace projection is the rank-one part)
    gx = grads[:, :, 0][:, None, :]
    gy = grads[:, :, 1][:, None, :]
    px = psi[:, :, :, 0]
    py = psi[:, :, :, 1]
    L_grad = np.zeros((ne, nq, 4, 12))
    L_grad[:, :, 0, 0:3] = gx
    L_grad[:, :, 1, 0:3] = gy
    L_grad[:, :, 2, 3:6] = gx
    L_grad[:, :, 3, 3:6] = gy
    L_grad[:, :, 0, 6:9] = -0.5 * px
    L_grad[:, :, 1, 6:9] = -py
    L_grad[:, :, 3, 6:9] = 0.5 * px
    L_grad[:, :, 0, 9:12] = 0.5 * py
    L_grad[:, :, 2, 9:12] = -px
    L_grad[:, :, 3, 9:12] = -0.5 * py
    I_grad = np.zeros((ne, nq, 4, 12))
    I_grad[:, :, 0, 6:9] = px
    I_grad[:, :, 1, 6:9] = py
    I_grad[:, :, 2, 9:12] = px
    I_grad[:, :, 3, 9:12] = py

    z_mom = ZBlock(name="momentum", ncomp=2, weights=weights)
    z_mom.ops["L"] = OpTable(L_mom, state_dofs, "state")
    z_mom.ops["Lstar"] = OpTable(L_mom, state_dofs, "adjoint")
    z_mom.ops["B:u"] = OpTable(B_mom, np.stack([np.arange(ne), ne + np.arange(ne)], 1), "u")
    z_mom.ops["AI"] = OpTable(AI_mom, state_dofs, "state")
    z_mom.ops["I"] = OpTable(AI_mom, state_dofs, "state")
    z_mom.ops["Istar"] = OpTable(Istar_mom, state_dofs, "adjoint")
    if problem.f is not None:
        z_mom.data["f"] = _eval(problem.f, pts).reshape(ne, nq, 2)
    if problem.z_d is not None:
        z_mom.data["Azd"] = _eval(problem.z_d, pts).reshape(ne, nq, 2)

    z_grad = ZBlock(name="gradient", ncomp=4, weights=weights)
    z_grad.ops["L"] = OpTable(L_grad, state_dofs, "state")
    z_grad.ops["Lstar"] = OpTable(L_grad, state_dofs, "adjoint")
    z_grad.ops["I"] = OpTable(I_grad, state_dofs, "state")
    z_grad.ops["Istar"] = OpTable(I_grad, state_dofs, "adjoint")

    # rank-one trace-mean coupling: t_j = integral of tr(basis_j)
    centroids = mesh.element_coords().mean(axis=1)
    t_vec = np.zeros(n_state)
    t_local = np.zeros((ne, 12))
    for r in range(2):
        for j in range(3):
            contrib = scalar_map.signs[:, j] * (
                centroids[:, r] - mesh.element_coords()[:, j, r]
            ) / 2.0
            dofs = scalar_map.element_dofs[:, j] + r * scalar_map.n_scalar + ymap.n_dofs
            np.add.at(t_vec, dofs, contrib)
            t_local[:, 6 + 3 * r + j] = contrib

    ctrl_vals = np.zeros((ne, nq, 2, 2))
    for c in range(2):
        ctrl_vals[:, :, c, c] = 1.0
    ctrl_dofs = np.stack([np.arange(ne), ne + np.arange(ne)], 1)
    xb = XBlock(
        group="u",
        weights=weights,
        ctrl=OpTable(ctrl_vals, ctrl_dofs, "u"),
        istar=OpTable(Istar_mom, state_dofs, "adjoint"),
    )

    cc = problem.constraints
    group = ControlGroup(
        name="u",
        n_dofs=2 * ne,
        dofs=ctrl_dofs,
        measures=np.tile(areas, 2),
        lam=problem.lam,
        lower=_broadcast_bounds(cc.lower, 2 * ne, 2),
        upper=_broadcast_bounds(cc.upper, 2 * ne, 2),
    )

    area_total = float(areas.sum())
    rank_one = (
        RankOne(block="state", vector=t_vec, coeff=1.0 / (2.0 * area_total),
                local=t_local, dofs=state_dofs),
        RankOne(block="adjoint", vector=t_vec.copy(), coeff=1.0 / (2.0 * area_total),
                local=t_local, dofs=state_dofs),
    )

    geom = {
        "rule": rule,
        "areas": areas,
        "weights": weights,
        "points": pts,
        "hats": hats,
        "grads": grads,
        "psi": psi,
        "rtdiv": div,
        "trace_vector": t_vec,
    }
    return Discretization(
        problem=problem,
        mesh=mesh,
        edge_table=table,
        quad_degree=quad_degree,
        state_parts=(("y", ymap, 0), ("M", mmap, ymap.n_dofs)),
        adjoint_parts=(("p", ymap, 0), ("N", mmap, ymap.n_dofs)),
        n_state=n_state,
        n_adjoint=n_state,
        state_elem_dofs=state_dofs,
        adjoint_elem_dofs=state_dofs,
        control_groups=(group,),
        zblocks=(z_mom, z_grad),
        xblocks=(xb,),
        rank_one=rank_one,
        domain_area=area_total,
        geom=geom,
    )


def _build_heat(problem, mesh, quad_degree):
    table = build_edge_table(mesh)
    rule = quadrature(quad_degree)
    nq = rule.weights.size
    ne = mesh.n_elements
    areas = mesh.areas()
    weights = 2.0 * areas[:, None] * rule.weights[None, :]
    pts = physical_points(mesh, rule)
    hats = np.broadcast_to(rule.points[None, :, :], (ne, nq, 3))
    grads = hat_gradients(mesh)  # coordinate 0 is t, coordinate 1 is x
    dt = grads[:, :, 0]
    dx = grads[:, :, 1]
    ymap = build_dof_map(mesh, S1_zero({SPATIAL_BOUNDARY}))
    smap = build_dof_map(mesh, S1())

    n_state = ymap.n_dofs + smap.n_dofs
    state_dofs = np.hstack([ymap.element_dofs, smap.element_dofs + ymap.n_dofs])

    L_evo = np.zeros((ne, nq, 1, 6))
    L_evo[:, :, 0, 0:3] = dt[:, None, :]
    L_evo[:, :, 0, 3:6] = -dx[:, None, :]
    Ls_evo = np.zeros((ne, nq, 1, 6))
    Ls_evo[:, :, 0, 0:3] = -dt[:, None, :]
    Ls_evo[:, :, 0, 3:6] = -dx[:, None, :]
    AI_evo = np.zeros((ne, nq, 1, 6))
    AI_evo[:, :, 0, 0:3] = hats

    L_flux = np.zeros((ne, nq, 1, 6))
    L_flux[:, :, 0, 0:3] = dx[:, None, :]
    L_flux[:, :, 0, 3:6] = -hats
    Ls_flux = L_flux
    I_flux = np.zeros((ne, nq, 1, 6))
    I_flux[:, :, 0, 3:6] = hats

    z_evo = ZBlock(name="evolution", ncomp=1, weights=weights)
    z_evo.ops["L"] = OpTable(L_evo, state_dofs, "state")
    z_evo.ops["Lstar"] = OpTable(Ls_evo, state_dofs, "adjoint")
    z_evo.ops["B:u"] = OpTable(np.full((ne, nq, 1, 1), -1.0), np.arange(ne)[:, None], "u")
    z_evo.ops["AI"] = OpTable(AI_evo, state_dofs, "state")
    z_evo.ops["I"] = OpTable(AI_evo, state_dofs, "state")
    z_evo.ops["Istar"] = OpTable(AI_evo, state_dofs, "adjoint")
    if problem.f is not None:
        z_evo.data["f"] = _eval(problem.f, pts).reshape(ne, nq, 1)
    if problem.z_d is not None:
        z_evo.data["Azd"] = _eval(problem.z_d, pts).reshape(ne, nq, 1)

    z_flux = ZBlock(name="flux", ncomp=1, weights=weights)
    z_flux.ops["L"] = OpTable(L_flux, state_dofs, "state")
    z_flux.ops["Lstar"] = OpTable(Ls_flux, state_dofs, "adjoint")
    z_flux.ops["I"] = OpTable(I_flux, state_dofs, "state")
    z_flux.ops["Istar"] = OpTable(I_flux, state_dofs, "adjoint")

    trace0, w0, pts0, hat0 = _trace_geometry(mesh, INITIAL_TIME, table, grads)
    traceT, wT, ptsT, hatT = _trace_geometry(mesh, FINAL_TIME, table, grads)
    ns0 = trace0.n_segments

    state_dofs0 = state_dofs[trace0.owners]
    adjoint_dofs0 = state_dofs0
    state_dofsT = state_dofs[traceT.owners]

    y_trace0 = np.zeros((ns0, hat0.shape[1], 1, 6))
    y_trace0[:, :, 0, 0:3] = hat0
    z_tr0 = ZBlock(name="initial-trace", ncomp=1, weights=w0, owners=trace0.owners)
    z_tr0.ops["L"] = OpTable(y_trace0, state_dofs0, "state")
    z_tr0.ops["Istar"] = OpTable(y_trace0, adjoint_dofs0, "adjoint")
    if problem.has_initial_control:
        z_tr0.ops["B:u0"] = OpTable(
            np.full((ns0, hat0.shape[1], 1, 1), -1.0), np.arange(ns0)[:, None], "u0"
        )
    if problem.y0 is not None:
        z_tr0.data["f"] = np.asarray(problem.y0(pts0[:, :, 1].reshape(-1)), dtype=float).reshape(
            ns0, -1, 1
        )

    nsT = traceT.n_segments
    y_traceT = np.zeros((nsT, hatT.shape[1], 1, 6))
    y_traceT[:, :, 0, 0:3] = hatT
    z_trT = ZBlock(name="final-trace", ncomp=1, weights=wT, owners=traceT.owners)
    z_trT.ops["Lstar"] = OpTable(y_traceT, state_dofsT, "adjoint")
    z_trT.ops["AI"] = OpTable(y_traceT, state_dofsT, "state")
    z_trT.ops["I"] = OpTable(y_traceT, state_dofsT, "state")
    if problem.z_dT is not None:
        z_trT.data["Azd"] = np.asarray(
            problem.z_dT(ptsT[:, :, 1].reshape(-1)), dtype=float
        ).reshape(nsT, -1, 1)

    xblocks = [
        XBlock(
            group="u",
            weights=weights,
            ctrl=OpTable(np.ones((ne, nq, 1, 1)), np.arange(ne)[:, None], "u"),
            istar=OpTable(AI_evo, state_dofs, "adjoint"),
        )
    ]
    cc = problem.constraints
    groups = [
        ControlGroup(
            name="u",
            n_dofs=ne,
            dofs=np.arange(ne)[:, None],
            measures=areas.copy(),
            lam=problem.lam,
            lower=_broadcast_bounds(cc.lower, ne, 1),
            upper=_broadcast_bounds(cc.upper, ne, 1),
        )
    ]
    if problem.has_initial_control:
        xblocks.append(
            XBlock(
                group="u0",
                weights=w0,
                ctrl=OpTable(np.ones((ns0, hat0.shape[1], 1, 1)), np.arange(ns0)[:, None], "u0"),
                istar=OpTable(y_trace0, adjoint_dofs0, "adjoint"),
            )
        )
        groups.append(
            ControlGroup(
                name="u0",
                n_dofs=ns0,
                dofs=np.arange(ns0)[:, None],
                measures=trace0.lengths.copy(),
                lam=problem.lam0,
                lower=np.full(ns0, float(cc.lower0)),
                upper=np.full(ns0, float(cc.upper0)),
            )
        )

    geom = {
        "rule": rule,
        "areas": areas,
        "weights": weights,
        "points": pts,
        "hats": hats,
        "grads": grads,
        "trace0": {"trace": trace0, "weights": w0, "points": pts0, "hats": hat0},
        "traceT": {"trace": traceT, "weights": wT, "points": ptsT, "hats": hatT},
    }
    return Discretization(
        problem=problem,
        mesh=mesh,
        edge_table=table,
        quad_degree=quad_degree,
        state_parts=(("y", ymap, 0), ("sigma", smap, ymap.n_dofs)),
        adjoint_parts=(("p", ymap, 0), ("xi", smap, ymap.n_dofs)),
        n_state=n_state,
        n_adjoint=n_state,
        state_elem_dofs=state_dofs,
        adjoint_elem_dofs=state_dofs,
        control_groups=tuple(groups),
        zblocks=(z_evo, z_flux, z_tr0, z_trT),
        xblocks=tuple(xblocks),
        rank_one=(),
        domain_area=float(areas.sum()),
        geom=geom,
    )


_BUILDERS = {DIFFUSION: _build_diffusion, STOKES: _build_stokes, HEAT: _build_heat}


def build_discretization(problem, mesh, quad_degree=4):
    """Tabulate all residual operators of a problem on a mesh."""
    return _BUILDERS[problem.kind](problem, mesh, quad_degree)


# ---------------------------------------------------------------------------
# per-element views (inspection and tests; assembly uses the full tables)


@dataclass(frozen=True)
class ResidualBlock:
    """Per-element slice of operator tables: component name -> (nq, ncomp, nloc)."""

    components: dict


def _element_view(disc, element, op):
    out = {}
    for zb in disc.zblocks:
        if op not in zb.ops:
            continue
        if zb.owners is None:
            out[zb.name] = zb.ops[op].values[element]
        else:
            for s in np.flatnonzero(zb.owners == element):
                out[zb.name] = zb.ops[op].values[s]
    return ResidualBlock(components=out)


def state_residual(problem, mesh, element, disc=None):
    """Action of the state first-order operator on the local state basis."""
    disc = disc if disc is not None else build_discretization(problem, mesh)
    return _element_view(disc, element, "L")


def adjoint_residual(problem, mesh, element, disc=None):
    """Action of the adjoint first-order operator on the local adjoint basis."""
    disc = disc if disc is not None else build_discretization(problem, mesh)
    return _element_view(disc, element, "Lstar")


def observation_map(problem, mesh, element, disc=None):
    """Observed components of the state basis plus the observation data."""
    disc = disc if disc is not None else build_discretization(problem, mesh)
    block = _element_view(disc, element, "AI")
    data = {}
    for zb in disc.zblocks:
        if "Azd" in zb.data and zb.owners is None:
            data[zb.name] = zb.data["Azd"][element]
    return block, data


def control_maps(problem, mesh, element, disc=None):
    """Control embedding on the control basis and the duality pairing tables."""
    disc = disc if disc is not None else build_discretization(problem, mesh)
    emb = {}
    for zb in disc.zblocks:
        for name, op in zb.ops.items():
            if not name.startswith("B:"):
                continue
            if zb.owners is None:
                emb[(zb.name, name[2:])] = op.values[element]
            else:
                for s in np.flatnonzero(zb.owners == element):
                    emb[(zb.name, name[2:])] = op.values[s]
    duality = {xb.group: xb.istar.values[element] for xb in disc.xblocks if xb.ctrl.values.shape[0] == mesh.n_elements}
    return ResidualBlock(components=emb), duality


def adjoint_identity_check(problem, mesh, n_pairs=20, seed=20210404, quad_degree=4, disc=None):
    """Maximum relative defect of <L y, I* p> = <I y, L* p> over random pairs."""
    import scipy.sparse as sp

    disc = disc if disc is not None else build_discretization(problem, mesh, quad_degree)
    C1 = sp.csr_matrix((disc.n_state, disc.n_adjoint))
    C2 = sp.csr_matrix((disc.n_state, disc.n_adjoint))
    for zb in disc.zblocks:
        if "L" in zb.ops and "Istar" in zb.ops:
            C1 = C1 + _pair_matrix(zb.ops["L"], zb.ops["Istar"], zb.weights, disc.n_state, disc.n_adjoint)
        if "I" in zb.ops and "Lstar" in zb.ops:
            C2 = C2 + _pair_matrix(zb.ops["I"], zb.ops["Lstar"], zb.weights, disc.n_state, disc.n_adjoint)

    ro = None
    if disc.rank_one:
        t_state = disc.rank_one[0].vector
        t_adj = disc.rank_one[1].vector
        ro = (t_state, t_adj, disc.rank_one[0].coeff)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        x = rng.standard_normal(disc.n_state)
        y = rng.standard_normal(disc.n_adjoint)
        lhs = float(x @ (C1 @ y))
        rhs = float(x @ (C2 @ y))
        if ro is not None:
            corr = ro[2] * (ro[0] @ x) * (ro[1] @ y)
            lhs -= corr
            rhs -= corr
        worst = max(worst, abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1e-30))
    return worst


def _pair_matrix(op_a, op_b, weights, n_rows, n_cols):
    import scipy.sparse as sp

    local = np.einsum("eqci,eqcj,eq->eij", op_a.values, op_b.values, weights, optimize=True)
    ni, nj = local.shape[1], local.shape[2]
    rows = np.repeat(op_a.dofs[:, :, None], nj, axis=2)
    cols = np.repeat(op_b.dofs[:, None, :], ni, axis=1)
    mask = (rows >= 0) & (cols >= 0)
    return sp.coo_matrix(
        (local[mask], (rows[mask], cols[mask])), shape=(n_rows, n_cols)
    ).tocsr()
