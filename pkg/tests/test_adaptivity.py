import math

import numpy as np
import pytest

from lsopt.adaptivity import AdaptConfig, ConvergenceRecord, adaptive_loop, compute_eoc, mark_doerfler
from lsopt.mesh import build_unit_square
from lsopt.problems import ControlConstraints, diffusion_problem
from lsopt.vi_solver import SolverConfig


def test_mark_all_with_theta_one():
    indicators = np.array([0.0, 2.0, 1.0, 0.0, 3.0])
    marked = mark_doerfler(indicators, 1.0)
    assert set(marked) == {1, 2, 4}


def test_mark_dominant_element():
    marked = mark_doerfler(np.array([9.0, 1.0, 1.0, 1.0]), 0.5)
    assert list(marked) == [0]


def test_mark_tie_breaking_lower_index():
    marked = mark_doerfler(np.array([1.0, 1.0, 1.0, 1.0]), 0.5)
    assert list(marked) == [0, 1]


def test_mark_zero_indicators_empty():
    assert mark_doerfler(np.zeros(5), 0.4).size == 0


def test_mark_minimality_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ind = rng.random(30) ** 4
        theta = rng.uniform(0.05, 1.0)
        marked = mark_doerfler(ind, theta)
        total = ind.sum()
        assert ind[marked].sum() >= theta * total - 1e-15
        if marked.size > 1:
            smallest = marked[np.argmin(ind[marked])]
            rest = np.setdiff1d(marked, [smallest])
            assert ind[rest].sum() < theta * total


def test_mark_validation():
    with pytest.raises(ValueError):
        mark_doerfler(np.array([1.0, -0.5]), 0.5)
    with pytest.raises(ValueError):
        mark_doerfler(np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        mark_doerfler(np.array([1.0]), 1.5)


def test_compute_eoc_closed_form():
    records = [
        ConvergenceRecord(level=0, n_dofs=100, h_max=1.0, estimate=1.0),
        ConvergenceRecord(level=1, n_dofs=400, h_max=0.5, estimate=0.5),
        ConvergenceRecord(level=2, n_dofs=1600, h_max=0.25, estimate=0.25),
    ]
    rates = compute_eoc(records, "estimate")
    assert rates == pytest.approx([0.5, 0.5])


def test_compute_eoc_constant_and_degenerate():
    records = [
        ConvergenceRecord(level=0, n_dofs=100, h_max=1.0, estimate=2.0),
        ConvergenceRecord(level=1, n_dofs=400, h_max=0.5, estimate=2.0),
        ConvergenceRecord(level=2, n_dofs=1600, h_max=0.25, estimate=0.0),
    ]
    rates = compute_eoc(records, "estimate")
    assert rates[0] == pytest.approx(0.0)
    assert math.isnan(rates[1])  # nonpositive value marks the pair
    assert compute_eoc(records[:1], "estimate") == []


def _problem():
    from lsopt.experiments import build_problem

    return build_problem("poisson-constrained")


def test_loop_single_record_when_max_dofs_small():
    result = adaptive_loop(
        _problem(), build_unit_square(2), SolverConfig(),
        AdaptConfig(max_dofs=1, uniform=True),
    )
    assert len(result.records) == 1
    assert result.status == "max-dofs"


def test_loop_uniform_quadruples_dofs():
    result = adaptive_loop(
        _problem(), build_unit_square(2), SolverConfig(),
        AdaptConfig(uniform=True, max_levels=3, max_dofs=10**9),
    )
    n = [r.n_dofs for r in result.records]
    assert len(n) == 3
    assert 3.0 < n[1] / n[0] < 4.5
    assert 3.0 < n[2] / n[1] < 4.5
    assert all(b > a for a, b in zip(n, n[1:]))  # N strictly increasing


def test_loop_quadrature_floor_status():
    # zero data drives all indicators to zero: the loop stops with a status
    problem = diffusion_problem(
        f=lambda p: np.zeros(p.shape[0]),
        z_d=lambda p: np.zeros(p.shape[0]),
        lam=1.0,
        constraints=ControlConstraints(lower=-1.0, upper=1.0),
    )
    result = adaptive_loop(
        problem, build_unit_square(2), SolverConfig(),
        AdaptConfig(theta=0.5, max_dofs=10**9, max_levels=10),
    )
    assert result.status == "quadrature-floor"
    assert len(result.records) == 1


def test_loop_determinism():
    config = AdaptConfig(theta=0.3, max_dofs=800)
    a = adaptive_loop(_problem(), build_unit_square(2), SolverConfig(), config)
    b = adaptive_loop(_problem(), build_unit_square(2), SolverConfig(), config)
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert ra.n_dofs == rb.n_dofs
        assert ra.estimate == pytest.approx(rb.estimate, rel=1e-12)


def test_adapt_config_validation():
    with pytest.raises(ValueError):
        AdaptConfig(theta=0.0)
    with pytest.raises(ValueError):
        AdaptConfig(theta=1.5)
