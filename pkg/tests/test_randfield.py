import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_ddm import randfield as rf

PARAMS = rf.RandomFieldParams()


def test_eigenvalues_decay():
    lam0, lam = rf.kl_eigenvalues(PARAMS)
    assert lam0 == pytest.approx(np.sqrt(np.pi * 0.25) / 2)
    assert lam[0] == pytest.approx(np.sqrt(np.pi) * 0.25 * np.exp(-(np.pi * 0.25) ** 2 / 4))
    assert np.all(np.diff(lam) < 0)


def test_rng_is_reproducible_and_keyed():
    a = rf.rng_for(3, 1, 7).uniform(size=5)
    b = rf.rng_for(3, 1, 7).uniform(size=5)
    assert np.array_equal(a, b)
    for key in [(4, 1, 7, 0), (3, 2, 7, 0), (3, 1, 8, 0), (3, 1, 7, 1)]:
        assert not np.array_equal(a, rf.rng_for(*key).uniform(size=5))


def test_samples_are_reproducible():
    s1 = rf.sample_conductivity(PARAMS, seed=5, level=2, j=9)
    s2 = rf.sample_conductivity(PARAMS, seed=5, level=2, j=9)
    y = np.linspace(-1, 0, 11)
    assert np.array_equal(s1.k11(0 * y, y), s2.k11(0 * y, y))


def test_default_field_is_positive_by_construction():
    assert PARAMS.worst_case_minimum() > 0


def test_mean_variance_and_positivity():
    y = np.array([-0.9, -0.5, -0.1])
    vals = np.array([rf.sample_conductivity(PARAMS, seed=1, j=j).k11(0 * y, y)
                     for j in range(20000)])
    lam0, lam = rf.kl_eigenvalues(PARAMS)
    var = PARAMS.sigma ** 2 * (lam0 + lam.sum())
    assert vals.min() > 0
    assert np.allclose(vals.mean(axis=0), PARAMS.a0, atol=4 * np.sqrt(var / 20000))
    assert np.allclose(vals.var(axis=0), var, rtol=0.05)


@settings(max_examples=25, deadline=None)
@given(j=st.integers(0, 10_000), y=st.floats(-0.99, -0.01))
def test_derivative_matches_finite_difference(j, y):
    s = rf.sample_conductivity(PARAMS, seed=0, j=j)
    h = 1e-6
    fd = (s.k11(0.0, y + h) - s.k11(0.0, y - h)) / (2 * h)
    assert s.dk_dy(0.0, y)[0] == pytest.approx(fd, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(k11=st.floats(0.01, 100), k22=st.floats(0.01, 100))
def test_constant_sample_tensor(k11, k22):
    s = rf.constant_sample(k11, k22)
    K = s.tensor(np.zeros(3), np.zeros(3))
    assert np.allclose(K[:, 0, 0], k11) and np.allclose(K[:, 1, 1], k22)
    assert np.all(K[:, 0, 1] == 0)
    assert np.all(s.dk_dy(0.0, 0.0) == 0)


def test_invalid_inputs_raise():
    with pytest.raises(ValueError):
        rf.constant_sample(-1.0)
    with pytest.raises(ValueError):
        rf.RandomFieldParams(a0=0.0)
    with pytest.raises(ValueError):
        rf.sample_conductivity(PARAMS, Y=np.zeros(3))


def test_positivity_floor_violation_raises():
    params = rf.RandomFieldParams(sigma=3.0)
    assert params.worst_case_minimum() < 0
    Y = -np.sqrt(3) * np.ones(params.n_coefficients)
    Y[params.n_terms + 1:] = 0.0
    with pytest.raises(rf.SamplingError):
        rf.sample_conductivity(params, Y=Y)


def test_uniform_constant_samples_in_range():
    ks = [rf.sample_uniform_constant(1.0, 2.0, 0, j).const[0] for j in range(200)]
    assert 1.0 <= min(ks) and max(ks) <= 2.0
    assert ks[3] == rf.sample_uniform_constant(1.0, 2.0, 0, 3).const[0]


def test_ensemble_stats_and_assumptions():
    samples = [rf.constant_sample(k) for k in (2.21, 4.11, 6.21)]
    pts = np.array([[1.0, -0.5], [2.0, -0.2]])
    ipts = np.array([[1.0, 0.0]])
    st_ = rf.ensemble_stats(samples, 1.0, pts, ipts)
    assert st_.kbar_min == pytest.approx(12.53 / 3, rel=1e-12)
    assert st_.rho_max == pytest.approx(6.21 - 12.53 / 3)
    rep = rf.assumption_check(st_)
    assert rep.k_holds and rep.eta_holds
    wide = [rf.constant_sample(k) for k in (0.1, 0.1, 10.0)]
    assert not rf.assumption_check(rf.ensemble_stats(wide, 1.0, pts, ipts)).k_holds
