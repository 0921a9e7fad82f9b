"""Sparse matrix assembly and direct solution of the coupled systems.

Thin layer over scipy.sparse: triplets are accumulated in per-call
buffers, compressed into CSR (duplicates summed), and solved with a
sparse LU factorization.  Every solve is followed by a residual check;
the systems are nonsymmetric but coercive, so a failed factorization or
a large residual signals an assembly bug and raises.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class LinearSolveError(RuntimeError):
    """Raised when a factorization fails or the residual check is violated."""


@dataclass
class TripletBuffer:
    """Accumulates (row, col, value) contributions; duplicates sum on assemble."""

    rows: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    vals: list = field(default_factory=list)

    def add(self, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=float).ravel()
        if not (rows.shape == cols.shape == vals.shape):
            raise ValueError("triplet arrays must have matching lengths")
        self.rows.append(rows)
        self.cols.append(cols)
        self.vals.append(vals)

    def concatenated(self):
        if not self.rows:
            empty = np.empty(0)
            return empty.astype(np.int64), empty.astype(np.int64), empty
        return (
            np.concatenate(self.rows),
            np.concatenate(self.cols),
            np.concatenate(self.vals),
        )


@dataclass(frozen=True)
class SparseMatrix:
    """Compressed sparse row matrix (sorted column indices, summed duplicates)."""

    csr: sp.csr_matrix

    @property
    def shape(self):
        return self.csr.shape

    @property
    def nnz(self):
        return self.csr.nnz

    def matvec(self, x):
        return self.csr @ x

    def __matmul__(self, x):
        return self.csr @ x

    def toarray(self):
        return self.csr.toarray()


def assemble(n_rows, n_cols, triplets):
    """Compress a triplet buffer into CSR; indices are range-checked."""
    rows, cols, vals = triplets.concatenated()
    if rows.size:
        if rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols:
            raise IndexError("triplet index out of range")
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return SparseMatrix(mat)


def solve_low_rank(A, U, V, rhs, tol=1e-10, block_names=None):
    """Solve (A + U V^T) x = rhs with sparse A and a few dense columns U, V.

    Uses the Sherman-Morrison-Woodbury identity around the factorization
    of A, then verifies the residual of the full operator.
    """
    mat = A.csr if isinstance(A, SparseMatrix) else sp.csr_matrix(A)
    rhs = np.asarray(rhs, dtype=float)
    norm_rhs = np.linalg.norm(rhs)
    if norm_rhs == 0.0:
        return np.zeros(mat.shape[0])
    structure = f" (blocks: {', '.join(block_names)})" if block_names else ""
    try:
        lu = spla.splu(mat.tocsc())
        z = lu.solve(rhs)
        W = np.column_stack([lu.solve(U[:, k]) for k in range(U.shape[1])])
        cap = np.eye(U.shape[1]) + V.T @ W
        x = z - W @ np.linalg.solve(cap, V.T @ z)
    except Exception as exc:
        raise LinearSolveError(
            f"low-rank-corrected factorization failed{structure}: {exc}"
        ) from exc
    if not np.all(np.isfinite(x)):
        raise LinearSolveError(f"singular-to-working-precision system{structure}")
    residual = np.linalg.norm(mat @ x + U @ (V.T @ x) - rhs) / norm_rhs
    if residual > tol:
        raise LinearSolveError(
            f"linear solve residual {residual:.3e} exceeds {tol:.1e}{structure}"
        )
    return x


def solve(A, rhs, tol=1e-10, block_names=None):
    """Direct sparse solve with post-hoc relative residual check.

    Raises LinearSolveError naming the block structure when the
    factorization fails or the residual exceeds `tol`.
    """
    mat = A.csr if isinstance(A, SparseMatrix) else sp.csr_matrix(A)
    n, m = mat.shape
    if n != m:
        raise ValueError("solve requires a square matrix")
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (n,):
        raise ValueError("right-hand side length does not match the matrix")
    norm_rhs = np.linalg.norm(rhs)
    if norm_rhs == 0.0:
        return np.zeros(n)
    structure = f" (blocks: {', '.join(block_names)})" if block_names else ""
    try:
        lu = spla.splu(mat.tocsc())
        x = lu.solve(rhs)
    except Exception as exc:
        raise LinearSolveError(
            f"sparse LU factorization failed{structure}: {exc}; "
            "coercivity guarantees invertibility, so this signals an assembly bug"
        ) from exc
    if not np.all(np.isfinite(x)):
        raise LinearSolveError(f"singular-to-working-precision system{structure}")
    residual = np.linalg.norm(mat @ x - rhs) / norm_rhs
    if residual > tol:
        raise LinearSolveError(
            f"linear solve residual {residual:.3e} exceeds {tol:.1e}{structure}"
        )
    return x
