"""Conforming triangulations with newest-vertex bisection refinement.

Meshes are immutable value objects: refinement returns a new mesh.  Each
element stores its vertices in positive orientation and the refinement
edge of element (v0, v1, v2) is by convention the edge {v0, v1}.  Initial
meshes assign the refinement edge to the longest edge of each triangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AREA_TOL = 1e-14

DIRICHLET = "dirichlet"
SPATIAL_BOUNDARY = "spatial-boundary"
INITIAL_TIME = "initial-time"
FINAL_TIME = "final-time"


@dataclass(frozen=True)
class Mesh:
    """Triangulation of a polygonal domain.

    Attributes
    ----------
    vertices : (nv, 2) float array
    elements : (ne, 3) int array
        Vertex indices in positive orientation; the refinement edge is
        the edge between the first two listed vertices.
    boundary_edges : (nb, 2) int array
        Sorted vertex pairs covering the domain boundary.
    boundary_labels : tuple of str
        One label per boundary edge.
    generation : (ne,) int array
        Bisection depth of each element (0 on initial meshes).
    """

    vertices: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: tuple
    generation: np.ndarray

    def __post_init__(self):
        for name in ("vertices", "elements", "boundary_edges", "generation"):
            arr = getattr(self, name)
            arr.setflags(write=False)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def element_coords(self):
        """Vertex coordinates per element, shape (ne, 3, 2)."""
        return self.vertices[self.elements]

    def signed_areas(self):
        xy = self.element_coords()
        d1 = xy[:, 1] - xy[:, 0]
        d2 = xy[:, 2] - xy[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def areas(self):
        a = self.signed_areas()
        if np.any(a <= AREA_TOL):
            raise ValueError("mesh contains a degenerate or misoriented element")
        return a

    def edge_lengths(self):
        """Lengths of the three edges per element, local edge i opposite vertex i."""
        xy = self.element_coords()
        out = np.empty((self.n_elements, 3))
        for i in range(3):
            a = xy[:, (i + 1) % 3]
            b = xy[:, (i + 2) % 3]
            out[:, i] = np.hypot(*(a - b).T)
        return out


@dataclass(frozen=True)
class EdgeTable:
    """Unique-edge bookkeeping for a mesh.

    ``elem_to_edge[e, i]`` is the global index of the edge opposite local
    vertex i of element e.  ``edge_to_elems`` lists the one or two
    incident elements per edge (-1 when absent); the first column is the
    first incident element (lowest element index), which fixes the
    orientation convention used by H(div) degrees of freedom.
    """

    edges: np.ndarray
    elem_to_edge: np.ndarray
    edge_to_elems: np.ndarray
    is_boundary: np.ndarray
    labels: tuple

    @property
    def n_edges(self):
        return self.edges.shape[0]

    def lengths(self, mesh):
        d = mesh.vertices[self.edges[:, 1]] - mesh.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])


def _edge_key(pairs, n_vertices):
    pairs = np.sort(pairs, axis=-1)
    return pairs[..., 0].astype(np.int64) * n_vertices + pairs[..., 1]


def build_edge_table(mesh):
    """Build the EdgeTable of a mesh; raises if the mesh is non-conforming."""
    ne = mesh.n_elements
    nv = mesh.n_vertices
    tri = mesh.elements
    # local edge i is opposite vertex i
    local = np.stack([tri[:, [1, 2]], tri[:, [2, 0]], tri[:, [0, 1]]], axis=1)
    keys = _edge_key(local.reshape(-1, 2), nv)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    n_edges = uniq.shape[0]
    edges = np.stack([uniq // nv, uniq % nv], axis=1).astype(tri.dtype)
    elem_to_edge = inverse.reshape(ne, 3)

    edge_to_elems = np.full((n_edges, 2), -1, dtype=tri.dtype)
    order = np.argsort(inverse, kind="stable")
    owner = order // 3
    start = np.concatenate([[0], np.cumsum(counts)])
    if np.any(counts > 2):
        raise ValueError("non-conforming mesh: an edge has more than two incident elements")
    edge_to_elems[:, 0] = owner[start[:-1]]
    two = counts == 2
    edge_to_elems[two, 1] = owner[start[:-1][two] + 1]

    is_boundary = counts == 1
    labels = [None] * n_edges
    declared = _edge_key(mesh.boundary_edges, nv) if mesh.boundary_edges.size else np.empty(0, np.int64)
    pos = np.searchsorted(uniq, declared)
    if declared.size and (np.any(pos >= n_edges) or np.any(uniq[pos] != declared)):
        raise ValueError("declared boundary edge is not an edge of the mesh")
    for k, p in enumerate(pos):
        labels[p] = mesh.boundary_labels[k]
    declared_mask = np.zeros(n_edges, dtype=bool)
    declared_mask[pos] = True
    if not np.array_equal(declared_mask, is_boundary):
        raise ValueError("non-conforming mesh: single-element edge without boundary label")
    return EdgeTable(edges, elem_to_edge, edge_to_elems, is_boundary, tuple(labels))


def _orient_ccw(tri, vertices):
    xy = vertices[tri]
    d1 = xy[:, 1] - xy[:, 0]
    d2 = xy[:, 2] - xy[:, 0]
    flip = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def _longest_edge_first(tri, vertices):
    """Cycle vertex order so the refinement edge {v0, v1} is the longest edge."""
    xy = vertices[tri]
    lengths = np.stack(
        [
            np.hypot(*(xy[:, 1] - xy[:, 0]).T),  # edge (v0, v1)
            np.hypot(*(xy[:, 2] - xy[:, 1]).T),  # edge (v1, v2)
            np.hypot(*(xy[:, 0] - xy[:, 2]).T),  # edge (v2, v0)
        ],
        axis=1,
    )
    rot = np.argmax(lengths, axis=1)
    out = tri.copy()
    out[rot == 1] = tri[rot == 1][:, [1, 2, 0]]
    out[rot == 2] = tri[rot == 2][:, [2, 0, 1]]
    return out


def _grid_mesh(cells, coords, label_fn):
    """Assemble a mesh from quadrilateral lattice cells split along a diagonal.

    cells: (nc, 4) vertex indices (a, b, c, d) counter-clockwise; each cell
    yields triangles (b, d, a) and (d, b, c) so both share the diagonal
    {b, d} as refinement edge.
    """
    a, b, c, d = cells.T
    tri = np.concatenate([np.stack([b, d, a], 1), np.stack([d, b, c], 1)])
    tri = _orient_ccw(tri, coords)
    tri = _longest_edge_first(tri, coords)

    # boundary edges: cell sides lying on the domain boundary
    sides = np.concatenate(
        [np.stack([a, b], 1), np.stack([b, c], 1), np.stack([c, d], 1), np.stack([d, a], 1)]
    )
    keys = _edge_key(sides, coords.shape[0])
    uniq, counts = np.unique(keys, return_counts=True)
    bnd = uniq[counts == 1]
    boundary = np.stack([bnd // coords.shape[0], bnd % coords.shape[0]], axis=1).astype(int)
    labels = tuple(label_fn(coords[e0], coords[e1]) for e0, e1 in boundary)
    return Mesh(
        vertices=coords.astype(float),
        elements=tri.astype(int),
        boundary_edges=boundary,
        boundary_labels=labels,
        generation=np.zeros(tri.shape[0], dtype=int),
    )


def build_unit_square(n):
    """Uniform triangulation of (0,1)^2 with n x n square cells, two triangles each."""
    if n < 1:
        raise ValueError("n must be a positive integer")
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    coords = np.stack([ii.ravel() / n, jj.ravel() / n], axis=1)

    def vid(i, j):
        return i * (n + 1) + j

    cells = []
    for i in range(n):
        for j in range(n):
            cells.append([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)])
    return _grid_mesh(np.array(cells), coords, lambda p, q: DIRICHLET)


def build_lshape(n):
    """Triangulation of (-1,1)^2 minus the closed third-quadrant square.

    Three unit squares, each subdivided as in build_unit_square(n); the
    re-entrant corner (0, 0) is a mesh vertex.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    index = {}
    coords = []

    def vid(i, j):
        key = (i, j)
        if key not in index:
            index[key] = len(coords)
            coords.append((i / n, j / n))
        return index[key]

    cells = []
    for i in range(-n, n):
        for j in range(-n, n):
            if i < 0 and j < 0:
                continue  # removed quadrant
            cells.append([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)])
    return _grid_mesh(np.array(cells), np.array(coords), lambda p, q: DIRICHLET)


def build_rectangle_spacetime(t_end, n):
    """Triangulation of the space-time rectangle (0, t_end) x (0, 1).

    Coordinates are ordered (t, x).  Boundary edges on x in {0, 1} carry
    the label "spatial-boundary", edges on t = 0 "initial-time" and on
    t = t_end "final-time".
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    coords = np.stack([ii.ravel() * (t_end / n), jj.ravel() / n], axis=1)

    def vid(i, j):
        return i * (n + 1) + j

    cells = []
    for i in range(n):
        for j in range(n):
            cells.append([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)])

    def label(p, q):
        if abs(p[0]) < AREA_TOL and abs(q[0]) < AREA_TOL:
            return INITIAL_TIME
        if abs(p[0] - t_end) < AREA_TOL and abs(q[0] - t_end) < AREA_TOL:
            return FINAL_TIME
        return SPATIAL_BOUNDARY

    return _grid_mesh(np.array(cells), coords, label)


def refine_nvb(mesh, marked):
    """Refine a mesh by newest-vertex bisection.

    Every marked element has all three edges bisected; conformity closure
    marks the refinement edges of affected neighbours until no hanging
    node remains.  Depending on how many of its edges end up marked, an
    element is bisected one to three times.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=int)
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.n_elements:
        raise IndexError("marked element index out of range")

    table = build_edge_table(mesh)
    ne = mesh.n_elements
    edge_marked = np.zeros(table.n_edges, dtype=bool)
    edge_marked[table.elem_to_edge[marked].ravel()] = True

    ref_edges = table.elem_to_edge[:, 2]
    for _ in range(ne + 1):
        any_marked = edge_marked[table.elem_to_edge].any(axis=1)
        need = any_marked & ~edge_marked[ref_edges]
        if not need.any():
            break
        edge_marked[ref_edges[need]] = True
    else:
        raise RuntimeError(
            "hanging-node closure did not terminate; refinement-edge assignment is broken"
        )

    # one new vertex per marked edge
    midpoint_id = np.full(table.n_edges, -1, dtype=int)
    marked_edges = np.flatnonzero(edge_marked)
    midpoint_id[marked_edges] = mesh.n_vertices + np.arange(marked_edges.size)
    midpoints = 0.5 * (
        mesh.vertices[table.edges[marked_edges, 0]] + mesh.vertices[table.edges[marked_edges, 1]]
    )
    vertices = np.vstack([mesh.vertices, midpoints])

    tri = mesh.elements
    gen = mesh.generation
    m0 = edge_marked[table.elem_to_edge[:, 0]]
    m1 = edge_marked[table.elem_to_edge[:, 1]]
    m2 = edge_marked[table.elem_to_edge[:, 2]]
    if np.any((m0 | m1) & ~m2):
        raise RuntimeError("closure invariant violated: marked edge without marked refinement edge")

    mid = midpoint_id[table.elem_to_edge]  # (ne, 3): m12, m20, m01 per local edge
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    m12, m20, m01 = mid[:, 0], mid[:, 1], mid[:, 2]

    chunks = []

    def emit(mask, cols, dgen):
        if not mask.any():
            return
        child = np.stack([c[mask] for c in cols], axis=1)
        chunks.append((child, gen[mask] + dgen))

    keep = ~m2
    emit(keep, (v0, v1, v2), 0)

    only_ref = m2 & ~m0 & ~m1
    emit(only_ref, (v2, v0, m01), 1)
    emit(only_ref, (v1, v2, m01), 1)

    ref_and_e0 = m2 & m0 & ~m1  # second child (v1, v2, m01) is bisected again
    emit(ref_and_e0, (v2, v0, m01), 1)
    emit(ref_and_e0, (m01, v1, m12), 2)
    emit(ref_and_e0, (v2, m01, m12), 2)

    ref_and_e1 = m2 & ~m0 & m1  # first child (v2, v0, m01) is bisected again
    emit(ref_and_e1, (v1, v2, m01), 1)
    emit(ref_and_e1, (m01, v2, m20), 2)
    emit(ref_and_e1, (v0, m01, m20), 2)

    full = m2 & m0 & m1
    emit(full, (m01, v2, m20), 2)
    emit(full, (v0, m01, m20), 2)
    emit(full, (m01, v1, m12), 2)
    emit(full, (v2, m01, m12), 2)

    new_tri = np.vstack([c for c, _ in chunks])
    new_gen = np.concatenate([g for _, g in chunks])

    # bisect boundary edges along with their elements; children inherit labels
    bkeys = _edge_key(mesh.boundary_edges, mesh.n_vertices)
    uniq = _edge_key(table.edges, mesh.n_vertices)
    bidx = np.searchsorted(uniq, bkeys)
    new_bedges = []
    new_blabels = []
    for k, eidx in enumerate(bidx):
        a, b = mesh.boundary_edges[k]
        label = mesh.boundary_labels[k]
        if edge_marked[eidx]:
            m = midpoint_id[eidx]
            new_bedges.extend([sorted((a, m)), sorted((m, b))])
            new_blabels.extend([label, label])
        else:
            new_bedges.append([a, b])
            new_blabels.append(label)

    return Mesh(
        vertices=vertices,
        elements=new_tri.astype(int),
        boundary_edges=np.asarray(new_bedges, dtype=int),
        boundary_labels=tuple(new_blabels),
        generation=new_gen.astype(int),
    )


def mesh_stats(mesh):
    """Basic size statistics: maximum element diameter and entity counts."""
    table = build_edge_table(mesh)
    return {
        "h_max": float(mesh.edge_lengths().max()),
        "n_elements": mesh.n_elements,
        "n_vertices": mesh.n_vertices,
        "n_edges": table.n_edges,
    }


def check_mesh(mesh):
    """Validate orientation, conformity and boundary labelling; raises on failure."""
    mesh.areas()
    build_edge_table(mesh)
    return True


def dump_mesh(mesh):
    """Plain-text dump (debugging aid): vertex list followed by element list."""
    lines = [f"vertices {mesh.n_vertices}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in mesh.vertices]
    lines.append(f"elements {mesh.n_elements}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.elements]
    return "\n".join(lines) + "\n"
