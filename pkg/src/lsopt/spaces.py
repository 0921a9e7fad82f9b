"""Lowest-order finite element spaces, quadrature and degree-of-freedom maps.

Supported families on triangles: elementwise constants (P0), continuous
piecewise linears (S1, optionally constrained on labelled boundary parts)
and lowest-order Raviart-Thomas fields (RT0).  Vector variants take
independent copies of the scalar family, component-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import build_edge_table


@dataclass(frozen=True)
class SpaceKind:
    family: str  # "P0", "S1" or "RT0"
    components: int = 1
    zero_labels: frozenset = frozenset()

    def __post_init__(self):
        if self.family not in ("P0", "S1", "RT0"):
            raise ValueError(f"unknown finite element family {self.family!r}")
        if self.zero_labels and self.family != "S1":
            raise ValueError("boundary constraints apply to the S1 family only")


def P0_scalar():
    return SpaceKind("P0")


def P0_vector(d):
    return SpaceKind("P0", components=d)


def S1():
    return SpaceKind("S1")


def S1_zero(labels):
    return SpaceKind("S1", zero_labels=frozenset(labels))


def S1_zero_vector(labels, d):
    return SpaceKind("S1", components=d, zero_labels=frozenset(labels))


def RT0():
    return SpaceKind("RT0")


def RT0_rows(d):
    return SpaceKind("RT0", components=d)


@dataclass(frozen=True)
class DofMap:
    """Global numbering of a finite element space on one mesh.

    element_dofs[e, k] is the global index of local dof k on element e,
    or -1 for constrained (Dirichlet) dofs.  For RT0, signs[e, i] is +1
    when element e is the first incident element of its local edge i.
    Vector variants are component-major: dof = comp * n_scalar + scalar.
    """

    kind: SpaceKind
    n_dofs: int
    n_scalar: int
    element_dofs: np.ndarray
    signs: np.ndarray | None = None

    @property
    def n_local(self):
        return self.element_dofs.shape[1]


@dataclass(frozen=True)
class DiscreteField:
    dofmap: DofMap
    coefficients: np.ndarray

    def __post_init__(self):
        if self.coefficients.shape != (self.dofmap.n_dofs,):
            raise ValueError("coefficient vector length does not match the dof map")

    @property
    def space(self):
        return self.dofmap.kind


@dataclass(frozen=True)
class QuadratureRule:
    """Symmetric rule on the reference triangle, barycentric points."""

    points: np.ndarray  # (nq, 3) barycentric coordinates
    weights: np.ndarray  # (nq,), sums to the reference area 1/2
    degree: int


def _bary(rows):
    pts = np.asarray(rows, dtype=float)
    return np.column_stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]])


_RULES = {}


def quadrature(degree):
    """Gaussian rule on the triangle, exact for polynomials up to `degree`."""
    if degree in _RULES:
        return _RULES[degree]
    if degree == 1:
        pts = _bary([[1 / 3, 1 / 3]])
        w = np.array([1.0])
    elif degree == 2:
        pts = _bary([[2 / 3, 1 / 6], [1 / 6, 2 / 3], [1 / 6, 1 / 6]])
        w = np.full(3, 1 / 3)
    elif degree == 4:
        a, b = 0.816847572980459, 0.091576213509771
        c, d = 0.108103018168070, 0.445948490915965
        pts = _bary([[a, b], [b, a], [b, b], [c, d], [d, c], [d, d]])
        w = np.array([0.109951743655322] * 3 + [0.223381589678011] * 3)
    elif degree == 6:
        a1, b1 = 0.873821971016996, 0.063089014491502
        a2, b2 = 0.501426509658179, 0.249286745170910
        a3, b3, c3 = 0.636502499121399, 0.310352451033785, 0.053145049844816
        pts = _bary(
            [
                [a1, b1], [b1, a1], [b1, b1],
                [a2, b2], [b2, a2], [b2, b2],
                [a3, b3], [b3, a3], [a3, c3], [c3, a3], [b3, c3], [c3, b3],
            ]
        )
        w = np.array(
            [0.050844906370207] * 3 + [0.116786275726379] * 3 + [0.082851075618374] * 6
        )
    else:
        raise ValueError(f"unsupported quadrature degree {degree}; supported: 1, 2, 4, 6")
    rule = QuadratureRule(points=pts, weights=w / 2.0, degree=degree)
    _RULES[degree] = rule
    return rule


def gauss_segment(n_points=3):
    """Gauss-Legendre points/weights on [0, 1] (weights sum to 1)."""
    x, w = np.polynomial.legendre.leggauss(n_points)
    return (x + 1.0) / 2.0, w / 2.0


def boundary_vertex_mask(mesh, labels):
    """Vertices lying on a boundary edge carrying one of the given labels."""
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    for (a, b), lab in zip(mesh.boundary_edges, mesh.boundary_labels):
        if lab in labels:
            mask[a] = True
            mask[b] = True
    return mask


def build_dof_map(mesh, kind, edge_table=None):
    """Number the global degrees of freedom of a space on a mesh."""
    ne = mesh.n_elements
    if kind.family == "P0":
        n_scalar = ne
        scalar_dofs = np.arange(ne, dtype=int)[:, None]
        signs = None
    elif kind.family == "S1":
        constrained = boundary_vertex_mask(mesh, kind.zero_labels) if kind.zero_labels else None
        if constrained is not None:
            unknown = kind.zero_labels - set(lab for lab in mesh.boundary_labels)
            if unknown:
                raise ValueError(f"unknown boundary label(s) {sorted(unknown)}")
            numbering = np.full(mesh.n_vertices, -1, dtype=int)
            free = ~constrained
            numbering[free] = np.arange(int(free.sum()))
            n_scalar = int(free.sum())
        else:
            numbering = np.arange(mesh.n_vertices, dtype=int)
            n_scalar = mesh.n_vertices
        scalar_dofs = numbering[mesh.elements]
        signs = None
    elif kind.family == "RT0":
        table = edge_table if edge_table is not None else build_edge_table(mesh)
        n_scalar = table.n_edges
        scalar_dofs = table.elem_to_edge.copy()
        first = table.edge_to_elems[table.elem_to_edge, 0]
        signs = np.where(first == np.arange(ne)[:, None], 1.0, -1.0)
    else:  # pragma: no cover
        raise ValueError(kind.family)

    if kind.components == 1:
        element_dofs = scalar_dofs
    else:
        parts = []
        for c in range(kind.components):
            shifted = np.where(scalar_dofs >= 0, scalar_dofs + c * n_scalar, -1)
            parts.append(shifted)
        element_dofs = np.concatenate(parts, axis=1)
    return DofMap(
        kind=kind,
        n_dofs=n_scalar * kind.components,
        n_scalar=n_scalar,
        element_dofs=element_dofs,
        signs=signs,
    )


def hat_gradients(mesh):
    """Physical gradients of the three barycentric hats, shape (ne, 3, 2)."""
    xy = mesh.element_coords()
    areas = mesh.areas()
    grads = np.empty((mesh.n_elements, 3, 2))
    for i in range(3):
        e = xy[:, (i + 2) % 3] - xy[:, (i + 1) % 3]
        # rotate the opposite edge by 90 degrees; normalize by twice the area
        grads[:, i, 0] = -e[:, 1]
        grads[:, i, 1] = e[:, 0]
    grads /= (2.0 * areas)[:, None, None]
    return grads


def physical_points(mesh, rule):
    """Map barycentric quadrature points to all elements, shape (ne, nq, 2)."""
    xy = mesh.element_coords()
    return np.einsum("qi,eid->eqd", rule.points, xy)


def rt0_values(mesh, dofmap, points):
    """RT0 basis values at physical points, shape (ne, nq, 3, 2).

    Unit-flux normalization: psi_i = s_i (x - a_i) / (2|T|), so the normal
    trace on the opposite edge e_i is s_i / |e_i| and its edge flux is s_i.
    """
    xy = mesh.element_coords()
    areas = mesh.areas()
    diff = points[:, :, None, :] - xy[:, None, :, :]  # (ne, nq, 3, 2)
    return dofmap.signs[:, None, :, None] * diff / (2.0 * areas)[:, None, None, None]


def rt0_divergences(mesh, dofmap):
    """Constant per-element divergences of the RT0 basis, shape (ne, 3)."""
    return dofmap.signs / mesh.areas()[:, None]


def eval_basis(kind, mesh, element, points):
    """Evaluate the local basis of one element at reference points (xi, eta).

    Returns a dict with "values" and, depending on the family, "gradients"
    (S1) or "divergences" (RT0).  RT0 values include orientation signs.
    """
    points = np.asarray(points, dtype=float)
    lam = np.column_stack([1.0 - points[:, 0] - points[:, 1], points[:, 0], points[:, 1]])
    if kind.family == "P0":
        return {"values": np.ones((points.shape[0], 1))}
    if kind.family == "S1":
        grads = hat_gradients(mesh)[element]
        return {"values": lam, "gradients": grads}
    if kind.family == "RT0":
        dofmap = build_dof_map(mesh, RT0())
        xy = mesh.element_coords()[element]
        phys = lam @ xy
        area = mesh.areas()[element]
        signs = dofmap.signs[element]
        diff = phys[:, None, :] - xy[None, :, :]
        vals = signs[None, :, None] * diff / (2.0 * area)
        divs = signs / area
        return {"values": vals, "divergences": divs}
    raise ValueError(kind.family)


def project_p0(mesh, f, degree=4):
    """Orthogonal projection onto elementwise constants via quadrature."""
    rule = quadrature(degree)
    pts = physical_points(mesh, rule)
    vals = np.asarray(f(pts.reshape(-1, 2))).reshape(mesh.n_elements, rule.weights.size)
    means = 2.0 * vals @ rule.weights  # reference weights sum to 1/2
    dofmap = build_dof_map(mesh, P0_scalar())
    return DiscreteField(dofmap, means)


@dataclass(frozen=True)
class TraceMesh:
    """One-dimensional trace of a 2D mesh along a labelled boundary part.

    Segments are boundary edges carrying the label, ordered along the
    line; each knows its owning element.  S1 trace dofs are the global S1
    dofs of the segment endpoints (-1 when constrained); the P0 trace dof
    of a segment is its index.
    """

    label: str
    segments: np.ndarray  # (ns, 2) vertex indices
    owners: np.ndarray  # (ns,) owning element per segment
    lengths: np.ndarray
    s1_dofs: np.ndarray  # (ns, 2) global S1 dofs of the endpoints

    @property
    def n_segments(self):
        return self.segments.shape[0]

    @property
    def total_length(self):
        return float(self.lengths.sum())


def trace_dofs(mesh, dofmap, label, edge_table=None):
    """Extract the 1D trace mesh of a labelled boundary part.

    dofmap must belong to an S1-family space on the same mesh.
    """
    if dofmap.kind.family != "S1":
        raise ValueError("trace extraction requires an S1 dof map")
    table = edge_table if edge_table is not None else build_edge_table(mesh)
    rows = [
        k
        for k in range(table.n_edges)
        if table.is_boundary[k] and table.labels[k] == label
    ]
    if not rows:
        return TraceMesh(
            label=label,
            segments=np.empty((0, 2), dtype=int),
            owners=np.empty(0, dtype=int),
            lengths=np.empty(0),
            s1_dofs=np.empty((0, 2), dtype=int),
        )
    segments = table.edges[rows]
    owners = table.edge_to_elems[rows, 0]
    d = mesh.vertices[segments[:, 1]] - mesh.vertices[segments[:, 0]]
    lengths = np.hypot(d[:, 0], d[:, 1])
    mids = 0.5 * (mesh.vertices[segments[:, 0]] + mesh.vertices[segments[:, 1]])
    order = np.lexsort((mids[:, 0], mids[:, 1]))
    segments, owners, lengths = segments[order], owners[order], lengths[order]

    numbering = np.full(mesh.n_vertices, -1, dtype=int)
    for e in range(mesh.n_elements):
        numbering[mesh.elements[e]] = dofmap.element_dofs[e, :3]
    s1 = numbering[segments]
    return TraceMesh(label=label, segments=segments, owners=owners, lengths=lengths, s1_dofs=s1)


def interpolate_s1(mesh, dofmap, f):
    """Nodal interpolation into an S1 space (constrained dofs dropped)."""
    values = np.asarray(f(mesh.vertices))
    coeffs = np.zeros(dofmap.n_scalar)
    for e in range(mesh.n_elements):
        for k in range(3):
            dof = dofmap.element_dofs[e, k]
            if dof >= 0:
                coeffs[dof] = values[mesh.elements[e, k]]
    if dofmap.kind.components != 1:
        raise ValueError("scalar interpolation only")
    return DiscreteField(dofmap, coeffs)


def interpolate_rt0(mesh, dofmap, flux, n_gauss=4, edge_table=None):
    """Edge-flux interpolation into RT0: coefficients are oriented edge fluxes."""
    if dofmap.kind.components != 1:
        raise ValueError("scalar RT0 interpolation only")
    table = edge_table if edge_table is not None else build_edge_table(mesh)
    x1d, w1d = gauss_segment(n_gauss)
    a = mesh.vertices[table.edges[:, 0]]
    b = mesh.vertices[table.edges[:, 1]]
    pts = a[:, None, :] + x1d[None, :, None] * (b - a)[:, None, :]
    vals = np.asarray(flux(pts.reshape(-1, 2))).reshape(table.n_edges, x1d.size, 2)

    # oriented normal: outward for the first incident element
    first = table.edge_to_elems[:, 0]
    tang = b - a
    normal = np.stack([tang[:, 1], -tang[:, 0]], axis=1)  # length |e|, sign fixed below
    centroids = mesh.vertices[mesh.elements].mean(axis=1)
    outward = np.einsum("ed,ed->e", normal, 0.5 * (a + b) - centroids[first])
    normal[outward < 0] *= -1.0
    coeffs = np.einsum("eqd,ed,q->e", vals, normal, w1d)
    return DiscreteField(dofmap, coeffs)
