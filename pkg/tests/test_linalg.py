import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings, strategies as st

from ensemble_ddm import linalg


def _random_system(n, seed):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=0.2, random_state=seed) + n * sp.eye(n)
    return A.tocsc(), rng.standard_normal((n, 4))


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 40), seed=st.integers(0, 1000))
def test_solve_many_matches_direct_solve(n, seed):
    A, B = _random_system(n, seed)
    fact = linalg.factorize(A)
    X = fact.solve_many(B, chunk=3)
    assert np.allclose(X, spla.spsolve(A, B), atol=1e-10)
    assert fact.n_solves == 4


def test_factorization_counter_counts_factorizations_only():
    A, B = _random_system(10, 0)
    n0 = linalg.factorization_count()
    fact = linalg.factorize(A)
    for _ in range(5):
        fact.solve(B[:, 0])
    assert linalg.factorization_count() - n0 == 1


def test_singular_matrix_raises():
    A = sp.csc_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(linalg.FactorizationError):
        linalg.factorize(A)


def test_rhs_shape_checked():
    fact = linalg.factorize(sp.eye(3).tocsc())
    with pytest.raises(ValueError):
        fact.solve(np.ones(4))


def test_dirichlet_elimination_round_trip():
    A = sp.csr_matrix(np.array([[2.0, -1, 0], [-1, 2, -1], [0, -1, 2]]))
    sys_ = linalg.SparseSystem(A, dirichlet=np.array([0, 2]), symmetric=True)
    assert sys_.n == 3 and sys_.reduced.shape == (1, 1)
    vals = np.array([1.0, 3.0])
    x_free = linalg.factorize(sys_).solve(-sys_.lift(vals))
    x = sys_.expand(x_free, vals)
    assert np.allclose(x, [1.0, 2.0, 3.0])
