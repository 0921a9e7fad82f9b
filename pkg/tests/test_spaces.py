import numpy as np
import pytest

from lsopt.mesh import build_edge_table, build_rectangle_spacetime, build_unit_square, refine_nvb
from lsopt.spaces import (
    DiscreteField,
    P0_scalar,
    RT0,
    RT0_rows,
    S1,
    S1_zero,
    build_dof_map,
    eval_basis,
    gauss_segment,
    hat_gradients,
    interpolate_rt0,
    interpolate_s1,
    physical_points,
    project_p0,
    quadrature,
    rt0_divergences,
    rt0_values,
    trace_dofs,
)

REF_TRI = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def analytic_monomial(a, b):
    # integral of x^a y^b over the reference triangle
    from math import factorial

    return factorial(a) * factorial(b) / factorial(a + b + 2)


def test_dof_counts_unit_square_n1():
    mesh = build_unit_square(1)
    assert build_dof_map(mesh, P0_scalar()).n_dofs == 2
    assert build_dof_map(mesh, S1_zero({"dirichlet"})).n_dofs == 0
    assert build_dof_map(mesh, RT0()).n_dofs == 5
    assert build_dof_map(mesh, S1()).n_dofs == 4
    assert build_dof_map(mesh, RT0_rows(2)).n_dofs == 10


def test_unknown_boundary_label_rejected():
    mesh = build_unit_square(2)
    with pytest.raises(ValueError):
        build_dof_map(mesh, S1_zero({"neumann"}))


@pytest.mark.parametrize("degree", [1, 2, 4, 6])
def test_quadrature_weight_sum(degree):
    rule = quadrature(degree)
    assert rule.weights.sum() == pytest.approx(0.5, abs=1e-14)


@pytest.mark.parametrize("degree", [1, 2, 4, 6])
def test_quadrature_monomial_exactness(degree):
    rule = quadrature(degree)
    pts = rule.points @ REF_TRI
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            approx = (pts[:, 0] ** a * pts[:, 1] ** b) @ rule.weights
            assert approx == pytest.approx(analytic_monomial(a, b), rel=1e-13, abs=1e-15)


def test_quadrature_degree4_x2y2():
    rule = quadrature(4)
    pts = rule.points @ REF_TRI
    val = (pts[:, 0] ** 2 * pts[:, 1] ** 2) @ rule.weights
    assert val == pytest.approx(1.0 / 180.0, rel=1e-12)


def test_quadrature_degree2_affine_centroid():
    rule = quadrature(2)
    pts = rule.points @ REF_TRI
    val = (3.0 * pts[:, 0] - 2.0 * pts[:, 1] + 1.0) @ rule.weights
    centroid = REF_TRI.mean(axis=0)
    assert val == pytest.approx(0.5 * (3 * centroid[0] - 2 * centroid[1] + 1), rel=1e-14)


def test_quadrature_unsupported_degree():
    with pytest.raises(ValueError):
        quadrature(3)
    with pytest.raises(ValueError):
        quadrature(7)


def test_s1_partition_of_unity():
    mesh = build_unit_square(2)
    out = eval_basis(S1(), mesh, 0, np.array([[0.1, 0.3], [0.2, 0.5], [1 / 3, 1 / 3]]))
    assert np.allclose(out["values"].sum(axis=1), 1.0)


def test_rt0_normal_trace_and_flux():
    mesh = build_unit_square(1)
    table = build_edge_table(mesh)
    dofmap = build_dof_map(mesh, RT0(), table)
    for elem in range(mesh.n_elements):
        xy = mesh.element_coords()[elem]
        area = mesh.areas()[elem]
        for local in range(3):
            a = xy[(local + 1) % 3]
            b = xy[(local + 2) % 3]
            length = np.linalg.norm(b - a)
            tang = (b - a) / length
            normal = np.array([tang[1], -tang[0]])
            centroid = xy.mean(axis=0)
            if np.dot(normal, 0.5 * (a + b) - centroid) < 0:
                normal = -normal  # outward
            sign = dofmap.signs[elem, local]
            for t in (0.2, 0.5, 0.9):
                point = a + t * (b - a)
                psi = sign * (point - xy[local]) / (2 * area)
                # constant normal trace sign/|e| and edge flux equal to sign
                assert np.dot(psi, normal) * sign == pytest.approx(1.0 / length)
            # divergence theorem: total flux equals the divergence integral
            div = sign / area
            assert div * area == pytest.approx(sign * 1.0)


def test_rt0_divergence_quadrature_vs_closed_form():
    mesh = build_unit_square(2)
    table = build_edge_table(mesh)
    dofmap = build_dof_map(mesh, RT0(), table)
    div = rt0_divergences(mesh, dofmap)
    areas = mesh.areas()
    # integral of div psi over the element equals the orientation sign
    assert np.allclose(div * areas[:, None], dofmap.signs)


def test_rt0_interelement_normal_continuity():
    mesh = refine_nvb(build_unit_square(2), [0, 3, 5])
    table = build_edge_table(mesh)
    dofmap = build_dof_map(mesh, RT0(), table)
    rng = np.random.default_rng(7)
    field = rng.standard_normal(dofmap.n_dofs)
    areas = mesh.areas()
    coords = mesh.element_coords()
    for edge in np.flatnonzero(~table.is_boundary):
        va, vb = table.edges[edge]
        mid = 0.5 * (mesh.vertices[va] + mesh.vertices[vb])
        tang = mesh.vertices[vb] - mesh.vertices[va]
        normal = np.array([tang[1], -tang[0]])
        normal /= np.linalg.norm(normal)
        traces = []
        for elem in table.edge_to_elems[edge]:
            local = np.flatnonzero(table.elem_to_edge[elem] == edge)[0]
            value = np.zeros(2)
            for j in range(3):
                psi = dofmap.signs[elem, j] * (mid - coords[elem, j]) / (2 * areas[elem])
                value += field[table.elem_to_edge[elem, j]] * psi
            traces.append(np.dot(value, normal))
        assert abs(traces[0] - traces[1]) < 1e-12


def test_s1_affine_interpolation_exact():
    mesh = build_unit_square(3)
    dofmap = build_dof_map(mesh, S1())
    affine = lambda p: 2.0 * p[:, 0] - 0.7 * p[:, 1] + 0.25
    field = interpolate_s1(mesh, dofmap, affine)
    rule = quadrature(2)
    pts = physical_points(mesh, rule)
    vals = np.einsum("ej,qj->eq", field.coefficients[mesh.elements], rule.points)
    exact = affine(pts.reshape(-1, 2)).reshape(vals.shape)
    assert np.max(np.abs(vals - exact)) < 1e-13


def test_project_p0_constant_and_affine():
    mesh = build_unit_square(1)
    const = project_p0(mesh, lambda p: np.full(p.shape[0], 3.25))
    assert np.allclose(const.coefficients, 3.25)
    linear = project_p0(mesh, lambda p: p[:, 0])
    centroids = mesh.element_coords().mean(axis=1)
    assert np.allclose(linear.coefficients, centroids[:, 0])


def test_project_p0_mean_property_and_idempotence():
    mesh = build_unit_square(2)
    f = lambda p: np.sin(3 * p[:, 0]) + p[:, 1] ** 2
    proj = project_p0(mesh, f)
    rule = quadrature(4)
    pts = physical_points(mesh, rule)
    vals = f(pts.reshape(-1, 2)).reshape(mesh.n_elements, -1)
    means = 2.0 * vals @ rule.weights
    # elementwise mean-zero property of the projection error
    assert np.allclose(means - proj.coefficients, 0.0, atol=1e-14)

    again = project_p0(mesh, lambda p: _piecewise_lookup(mesh, proj.coefficients, p))
    assert np.allclose(again.coefficients, proj.coefficients, atol=1e-13)


def _piecewise_lookup(mesh, coefficients, pts):
    # quadrature points of project_p0 come elementwise in order
    n = pts.shape[0] // mesh.n_elements
    return np.repeat(coefficients, n)


def test_trace_dofs_final_time():
    mesh = build_rectangle_spacetime(1.0, 2)
    dofmap = build_dof_map(mesh, S1())
    trace = trace_dofs(mesh, dofmap, "final-time")
    assert trace.total_length == pytest.approx(1.0)
    assert trace.n_segments == 2
    # trace of the time-coordinate function is constant T_end
    tfield = interpolate_s1(mesh, dofmap, lambda p: p[:, 0])
    coeffs = tfield.coefficients[trace.segments]
    assert np.allclose(coeffs, 1.0)
    # dof count on the line equals the number of vertices there
    verts = np.unique(trace.segments)
    assert verts.size == 3


def test_trace_empty_label():
    mesh = build_unit_square(1)
    dofmap = build_dof_map(mesh, S1())
    trace = trace_dofs(mesh, dofmap, "no-such-label")
    assert trace.n_segments == 0
    assert trace.total_length == 0.0


def test_rt0_interpolation_of_constant_field():
    mesh = build_unit_square(2)
    table = build_edge_table(mesh)
    dofmap = build_dof_map(mesh, RT0(), table)
    field = interpolate_rt0(mesh, dofmap, lambda p: np.tile([1.0, 2.0], (p.shape[0], 1)))
    rule = quadrature(2)
    pts = physical_points(mesh, rule)
    vals = rt0_values(mesh, dofmap, pts)
    recon = np.einsum("ej,eqjd->eqd", field.coefficients[table.elem_to_edge], vals)
    assert np.max(np.abs(recon - np.array([1.0, 2.0]))) < 1e-12


def test_discrete_field_length_check():
    mesh = build_unit_square(1)
    dofmap = build_dof_map(mesh, P0_scalar())
    with pytest.raises(ValueError):
        DiscreteField(dofmap, np.zeros(dofmap.n_dofs + 1))


def test_gauss_segment_weights():
    x, w = gauss_segment(3)
    assert w.sum() == pytest.approx(1.0)
    # integrates degree-5 polynomials on [0, 1]
    assert (x**5) @ w == pytest.approx(1.0 / 6.0, rel=1e-13)


def test_hat_gradients_reference():
    mesh = build_unit_square(1)
    grads = hat_gradients(mesh)
    ones = grads.sum(axis=1)
    assert np.allclose(ones, 0.0, atol=1e-14)  # gradients of a partition of unity
