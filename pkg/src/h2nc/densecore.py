"""Entry oracles and the small dense kernels used by the compression: pivoted LU,
truncated SVD and the maxvol dominant-submatrix search."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.linalg

LU_PIVOT_FLOOR = 1e-14


class RankDeficiencyError(ValueError):
    """Raised when a matrix has fewer numerically independent columns than requested."""

    def __init__(self, rank: int, expected: int):
        super().__init__(f"numerical rank {rank} < {expected}")
        self.rank = rank
        self.expected = expected


class MatrixOracle:
    """Access to a matrix through its entries only.

    Subclasses implement :meth:`_block`. ``matmat`` / ``rmatmat`` fall back to
    streaming row panels through ``eval_block``; kernels with a cheap closed
    form override them.
    """

    shape: tuple[int, int]
    dtype = np.float64

    def _block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eval_block(self, rows, cols) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.intp).reshape(-1)
        cols = np.asarray(cols, dtype=np.intp).reshape(-1)
        if rows.size == 0 or cols.size == 0:
            return np.zeros((rows.size, cols.size), dtype=self.dtype)
        return self._block(rows, cols)

    def eval(self, i: int, j: int):
        return self.eval_block([i], [j])[0, 0]

    def dense(self) -> np.ndarray:
        n, m = self.shape
        return self.eval_block(np.arange(n), np.arange(m))

    def _panels(self, panel_entries=4_000_000):
        n, m = self.shape
        step = max(1, panel_entries // max(m, 1))
        cols = np.arange(m)
        for start in range(0, n, step):
            rows = np.arange(start, min(n, start + step))
            yield rows, self.eval_block(rows, cols)

    def matmat(self, x: np.ndarray) -> np.ndarray:
        """``A @ x`` over the whole matrix."""
        x = np.asarray(x)
        out = np.zeros((self.shape[0],) + x.shape[1:], dtype=np.result_type(self.dtype, x))
        for rows, panel in self._panels():
            out[rows] = panel @ x
        return out

    def rmatmat(self, y: np.ndarray) -> np.ndarray:
        """``A.T @ y`` over the whole matrix."""
        y = np.asarray(y)
        out = np.zeros((self.shape[1],) + y.shape[1:], dtype=np.result_type(self.dtype, y))
        for rows, panel in self._panels():
            out += panel.T @ y[rows]
        return out


class DenseOracle(MatrixOracle):
    """Oracle backed by an explicit array (tests and small problems)."""

    def __init__(self, a):
        self.a = np.asarray(a)
        self.shape = self.a.shape
        self.dtype = self.a.dtype

    def _block(self, rows, cols):
        return self.a[np.ix_(rows, cols)]

    def matmat(self, x):
        return self.a @ x

    def rmatmat(self, y):
        return self.a.T @ y


class CountingOracle(MatrixOracle):
    """Wraps an oracle and counts evaluated entries."""

    def __init__(self, inner: MatrixOracle):
        self.inner = inner
        self.shape = inner.shape
        self.dtype = inner.dtype
        self.entries = 0
        self._lock = threading.Lock()

    def eval_block(self, rows, cols):
        block = self.inner.eval_block(rows, cols)
        with self._lock:
            self.entries += block.size
        return block

    def __getattr__(self, name):
        # proxy-point evaluation and the like pass straight through
        return getattr(self.inner, name)


@dataclass
class MaxvolResult:
    selected: np.ndarray
    coefficients: np.ndarray
    iterations: int = 0


def pivoted_lu_rows(a: np.ndarray) -> np.ndarray:
    """Row indices of a nonsingular ``r x r`` submatrix of an ``n x r`` matrix.

    Rows are the pivots of LU with partial pivoting. A pivot smaller than
    ``LU_PIVOT_FLOOR`` times the first pivot is treated as rank deficiency.
    """
    a = np.asarray(a)
    n, r = a.shape
    if r == 0:
        return np.zeros(0, dtype=np.intp)
    if n < r:
        raise RankDeficiencyError(n, r)
    p, _, u = scipy.linalg.lu(a, p_indices=True)
    # p[k] is the row of ``a`` that ends up in position k
    rows = np.empty(n, dtype=np.intp)
    rows[p] = np.arange(n)
    pivots = np.abs(np.diag(u))
    if pivots[0] == 0 or not np.all(np.isfinite(pivots)):
        raise RankDeficiencyError(0, r)
    good = pivots > LU_PIVOT_FLOOR * pivots[0]
    if not good.all():
        raise RankDeficiencyError(int(np.argmin(good)), r)
    return rows[:r]


def maxvol(a: np.ndarray, delta: float = 0.05, max_iters: int = 100) -> MaxvolResult:
    """Greedy search for a dominant ``r x r`` submatrix of a tall ``n x r`` matrix.

    Returns the selected rows and ``C = A @ inv(A[selected])``; on exit every
    ``|C_ij| <= 1 + delta`` unless ``max_iters`` swaps were spent.
    """
    a = np.asarray(a)
    n, r = a.shape
    if r == 0:
        return MaxvolResult(np.zeros(0, dtype=np.intp), np.zeros((n, 0), dtype=a.dtype))
    if n == r:
        return MaxvolResult(np.arange(n), np.eye(n, dtype=a.dtype))

    sel = pivoted_lu_rows(a)
    c = scipy.linalg.solve(a[sel].T, a.T).T
    bound = 1.0 + delta
    it = 0
    while it < max_iters:
        flat = int(np.argmax(np.abs(c)))
        i, j = divmod(flat, r)
        cij = c[i, j]
        if abs(cij) <= bound:
            break
        sel[j] = i
        row = c[i].copy()
        row[j] -= 1.0
        c -= np.outer(c[:, j] / cij, row)
        it += 1
    c[sel] = np.eye(r, dtype=c.dtype)
    return MaxvolResult(sel, c, it)


def truncated_svd(a: np.ndarray, rel_tol: float):
    """SVD cut at the first singular value ``<= rel_tol * sigma_1``.

    Returns ``(U, S, V)`` with ``a ~= U @ diag(S) @ V``; rank 0 is a valid result.
    """
    a = np.asarray(a)
    n, m = a.shape
    if n == 0 or m == 0:
        return np.zeros((n, 0), a.dtype), np.zeros(0), np.zeros((0, m), a.dtype)
    try:
        u, s, vh = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        u, s, vh = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
    if s[0] == 0:
        k = 0
    else:
        k = int(np.count_nonzero(s > rel_tol * s[0]))
    return u[:, :k], s[:k], vh[:k]


def skeleton_reconstruct(oracle: MatrixOracle, basis_rows, basis_cols) -> np.ndarray:
    """Dense ``C @ inv(A_hat) @ R`` from the given cross; a small-size test oracle."""
    n, m = oracle.shape
    basis_rows = np.asarray(basis_rows, dtype=np.intp)
    basis_cols = np.asarray(basis_cols, dtype=np.intp)
    a_hat = oracle.eval_block(basis_rows, basis_cols)
    if a_hat.shape[0] != a_hat.shape[1]:
        raise ValueError("cross must be square")
    c = oracle.eval_block(np.arange(n), basis_cols)
    r = oracle.eval_block(basis_rows, np.arange(m))
    if a_hat.size and np.linalg.matrix_rank(a_hat) < a_hat.shape[0]:
        raise np.linalg.LinAlgError("singular cross submatrix")
    return c @ np.linalg.solve(a_hat, r)
