"""Sparse systems with Dirichlet elimination and reusable direct factorizations.

The ensemble method pays off only if each operator is factorized once and
then applied to many right-hand sides; :class:`Factorization` counts both
so callers can verify that.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class FactorizationError(RuntimeError):
    pass


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def increment(self):
        with self._lock:
            self.value += 1


FACTORIZATIONS = _Counter()


def factorization_count() -> int:
    """Number of factorizations created in this process so far."""
    return FACTORIZATIONS.value


@dataclass
class SparseSystem:
    """Square operator on a full dof vector, with some dofs prescribed.

    ``matrix`` acts on all dofs; rows and columns of ``dirichlet`` dofs are
    eliminated on demand, and their prescribed values move to the
    right-hand side through :meth:`lift`.
    """

    matrix: sp.csr_matrix
    dirichlet: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    symmetric: bool = False

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        self.matrix.sum_duplicates()
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n):
            raise ValueError(f"system must be square, got {self.matrix.shape}")
        self.dirichlet = np.asarray(self.dirichlet, dtype=np.int64)
        mask = np.ones(n, dtype=bool)
        mask[self.dirichlet] = False
        self.free = np.flatnonzero(mask)
        rows = self.matrix[self.free]
        self._ff = rows[:, self.free].tocsc()
        self._fd = rows[:, self.dirichlet].tocsr()

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def reduced(self) -> sp.csc_matrix:
        return self._ff

    def lift(self, values: np.ndarray) -> np.ndarray:
        """Contribution ``A[free, dirichlet] @ values`` (columns allowed)."""
        return self._fd @ values

    def expand(self, x_free, values, out=None):
        """Full vector(s) from free unknowns and prescribed values."""
        shape = (self.n,) + np.shape(x_free)[1:]
        full = np.empty(shape) if out is None else out
        full[self.free] = x_free
        full[self.dirichlet] = values
        return full


class Factorization:
    """Sparse LU factorization with reuse counters.

    Attributes
    ----------
    factor_time : float
        Wall-clock seconds spent factorizing.
    solve_time : float
        Accumulated wall-clock seconds in solves.
    n_solves : int
        Number of right-hand sides solved.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"cannot factorize non-square matrix {A.shape}")
        self.n = A.shape[0]
        t0 = time.perf_counter()
        try:
            self._lu = spla.splu(A, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise FactorizationError(f"factorization failed: {exc}") from exc
        self.factor_time = time.perf_counter() - t0
        diag = np.abs(self._lu.U.diagonal())
        self.min_pivot = float(diag.min()) if diag.size else 0.0
        if not np.all(np.isfinite(diag)) or self.min_pivot == 0.0:
            raise FactorizationError(
                f"singular matrix: zero pivot (min |U_ii| = {self.min_pivot:g})")
        self.fill = self._lu.L.nnz + self._lu.U.nnz
        self.solve_time = 0.0
        self.n_solves = 0
        self._lock = threading.Lock()
        FACTORIZATIONS.increment()

    def solve(self, b):
        return self.solve_many(b)

    def solve_many(self, B, chunk: int = 256):
        """Solve ``A X = B`` column by column against the shared factors."""
        B = np.asarray(B, dtype=float)
        if B.shape[0] != self.n:
            raise ValueError(f"right-hand side has {B.shape[0]} rows, expected {self.n}")
        t0 = time.perf_counter()
        if B.ndim == 1:
            X = self._lu.solve(B)
            ncols = 1
        else:
            ncols = B.shape[1]
            X = np.empty_like(B)
            for s in range(0, ncols, chunk):
                X[:, s:s + chunk] = self._lu.solve(np.ascontiguousarray(B[:, s:s + chunk]))
        with self._lock:
            self.solve_time += time.perf_counter() - t0
            self.n_solves += ncols
        return X


def factorize(A) -> Factorization:
    if isinstance(A, SparseSystem):
        A = A.reduced
    return Factorization(A)


def solve_many(fact: Factorization, B):
    return fact.solve_many(B)
