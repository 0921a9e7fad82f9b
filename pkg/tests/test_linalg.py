import numpy as np
import pytest

from lsopt.linalg import LinearSolveError, SparseMatrix, TripletBuffer, assemble, solve


def test_duplicate_triplets_are_summed():
    buf = TripletBuffer()
    buf.add([0, 0], [0, 0], [1.0, 2.0])
    mat = assemble(2, 2, buf)
    dense = mat.toarray()
    assert dense[0, 0] == 3.0
    assert mat.nnz == 1


def test_empty_triplets_zero_matrix():
    mat = assemble(3, 3, TripletBuffer())
    x = np.arange(3.0)
    assert np.all(mat @ x == 0.0)


def test_random_triplets_match_dense_accumulation():
    rng = np.random.default_rng(123)
    n = 20
    rows = rng.integers(0, n, size=300)
    cols = rng.integers(0, n, size=300)
    vals = rng.standard_normal(300)
    dense = np.zeros((n, n))
    np.add.at(dense, (rows, cols), vals)
    buf = TripletBuffer()
    buf.add(rows, cols, vals)
    mat = assemble(n, n, buf)
    x = rng.standard_normal(n)
    assert np.max(np.abs(mat @ x - dense @ x)) < 1e-14


def test_index_out_of_range():
    buf = TripletBuffer()
    buf.add([0], [5], [1.0])
    with pytest.raises(IndexError):
        assemble(3, 3, buf)


def _matrix(dense):
    buf = TripletBuffer()
    rows, cols = np.nonzero(dense)
    buf.add(rows, cols, dense[rows, cols])
    return assemble(*dense.shape, buf)


def test_solve_identity():
    rhs = np.array([3.0, -1.0, 2.0])
    x = solve(_matrix(np.eye(3)), rhs)
    assert np.allclose(x, rhs)


def test_solve_upper_triangular():
    A = np.array([[2.0, 1.0], [0.0, 3.0]])
    x = solve(_matrix(A), np.array([3.0, 3.0]))
    assert np.allclose(x, [1.0, 1.0])


def test_solve_five_point_laplacian_matches_dense():
    n = 5
    N = n * n
    A = np.zeros((N, N))
    for i in range(n):
        for j in range(n):
            k = i * n + j
            A[k, k] = 4.0
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < n and 0 <= jj < n:
                    A[k, ii * n + jj] = -1.0
    rng = np.random.default_rng(5)
    rhs = rng.standard_normal(N)
    x = solve(_matrix(A), rhs)
    assert np.linalg.norm(x - np.linalg.solve(A, rhs)) < 1e-10


def test_solve_zero_rhs_returns_zero():
    A = _matrix(np.array([[2.0, 1.0], [1.0, 3.0]]))
    x = solve(A, np.zeros(2))
    assert np.all(x == 0.0)


def test_singular_matrix_raises_with_block_names():
    A = _matrix(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(LinearSolveError) as err:
        solve(A, np.array([1.0, 2.0]), block_names=("control", "state"))
    assert "control" in str(err.value)


def test_solve_residual_contract_on_random_system():
    rng = np.random.default_rng(11)
    n = 40
    A = np.eye(n) * 5 + rng.standard_normal((n, n)) * 0.3  # diagonally dominant
    rhs = rng.standard_normal(n)
    x = solve(_matrix(A), rhs)
    assert np.linalg.norm(A @ x - rhs) / np.linalg.norm(rhs) <= 1e-10
