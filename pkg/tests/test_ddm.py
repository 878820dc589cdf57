import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_ddm import ddm, oracle
from ensemble_ddm.ddm import DdmConfig, DdmInputError

TEST1_K = (2.21, 4.11, 6.21)


def test_update_coefficients_example():
    assert ddm.update_coefficients(1.0, 2.0) == (0.5, -1.5, -1.0, 3.0)
    with pytest.raises(DdmInputError):
        ddm.update_coefficients(0.0, 1.0)


def test_trace_update_example():
    df, dp = ddm.trace_update(np.array([1.0, 2.0]), np.array([3.0, 4.0]),
                              np.array([0.5, 1.0]), np.array([2.0, -1.0]),
                              ddm.update_coefficients(1.0, 2.0), g=1.0)
    assert np.allclose(df, [0.5 * 3 - 1.5 * 2, 0.5 * 4 + 1.5])
    assert np.allclose(dp, [-1 + 3 * 0.5, -2 + 3 * 1.0])
    with pytest.raises(DdmInputError):
        ddm.trace_update(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), (1, 1, 1, 1), 1.0)


def _optimal_mp(mu, det, length, h):
    mpmath.mp.dps = 50
    mu, det, length, h = map(mpmath.mpf, (mu, det, length, h))
    smin, smax = mpmath.pi / length, mpmath.pi / h
    t = (1 - 2 * mu * det * smin * smax) / (det * (smin + smax))
    r = mpmath.sqrt(t * t + 2 * mu / det)
    return t + r, -t + r


def test_optimal_parameters_golden_value():
    det = (sum(TEST1_K) / 3) ** 2
    gf, gp = ddm.optimal_robin_parameters(1.0, det, np.pi, 1 / 32)
    ef, ep = _optimal_mp(1.0, det, mpmath.pi, mpmath.mpf(1) / 32)
    assert gf == pytest.approx(float(ef), rel=1e-13)
    assert gp == pytest.approx(float(ep), rel=1e-13)
    assert (gf, gp) == pytest.approx((0.02874691, 3.98822086), abs=5e-9)


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(1e-3, 1e3), det=st.floats(1e-3, 1e3),
       length=st.floats(0.1, 10.0), h=st.floats(1e-3, 0.5))
def test_optimal_parameters_product_identity(mu, det, length, h):
    gf, gp = ddm.optimal_robin_parameters(mu, det, length, h)
    assert gf > 0 and gp > 0
    assert gf * gp == pytest.approx(2 * mu / det, rel=1e-12)


def test_optimal_parameters_reject_bad_input():
    with pytest.raises(DdmInputError):
        ddm.optimal_robin_parameters(1.0, 0.0, np.pi, 0.1)


def test_config_rejects_gamma_f_above_gamma_p():
    with pytest.raises(DdmInputError):
        DdmConfig(gamma_f=2.0, gamma_p=1.0)
    DdmConfig(gamma_f=2.0, gamma_p=1.0, allow_gamma_f_gt_gamma_p=True)
    with pytest.raises(DdmInputError):
        DdmConfig(mode="nope")


def _fixed_point_init(spaces, sols, gf, gp, g=1.0):
    tr = spaces.trace
    u = np.column_stack([s.u for s in sols])
    phi = np.column_stack([s.phi for s in sols])
    un = tr.project(spaces.select_un @ u)
    ph = tr.project(spaces.select_phi @ phi)
    return u, phi, gf * un - g * ph, gp * un + g * ph


@pytest.mark.parametrize("ks", [(4.11,), TEST1_K])
def test_monolithic_solution_is_a_fixed_point(spaces8, ks):
    cases = [oracle.test1_case(k) for k in ks]
    cfg = DdmConfig(mode="optimal", tol=1e-8, max_iter=1)
    data = ddm.prepare_ensemble(spaces8, cases, cfg.alpha)
    gf, gp = ddm.robin_pairs(data, cfg)[0]
    sols = [oracle.monolithic_coupled_solve(spaces8, c) for c in cases]
    _, hist = ddm.ensemble_ddm_solve(spaces8, cases, cfg, data=data,
                                     init=_fixed_point_init(spaces8, sols, gf, gp))
    assert hist.increments[0].max() < 1e-8


def test_single_sample_ensemble_equals_traditional(spaces8):
    case = oracle.test1_case(4.11)
    cfg = DdmConfig(mode="optimal", tol=1e-10)
    a, ha = ddm.ensemble_ddm_solve(spaces8, [case], cfg)
    b, hb = ddm.traditional_ddm_solve(spaces8, case, cfg)
    assert np.abs(a.u - b.u).max() < 1e-10
    assert np.abs(a.phi - b.phi).max() < 1e-10
    assert ha.iterations[0] == hb.iterations[0]


def test_ensemble_makes_two_factorizations(spaces8):
    cases = [oracle.test1_case(k) for k in TEST1_K]
    _, hist = ddm.ensemble_ddm_solve(spaces8, cases, DdmConfig(mode="optimal"))
    assert hist.n_factorizations == 2
    assert hist.converged
    _, hist = ddm.ensemble_ddm_solve(spaces8, cases, DdmConfig(mode="per_sample"))
    assert hist.n_factorizations == 6


def test_converged_traces_satisfy_compatibility(spaces8):
    cases = [oracle.test1_case(k) for k in TEST1_K]
    cfg = DdmConfig(mode="optimal", tol=1e-9)
    sol, hist = ddm.ensemble_ddm_solve(spaces8, cases, cfg)
    gf, gp = hist.gammas[0]
    assert ddm.compatibility_residual(sol, gf, gp, cfg.g).max() < 10 * cfg.tol


def test_history_csv(tmp_path, spaces8):
    _, hist = ddm.ensemble_ddm_solve(spaces8, [oracle.test1_case(2.21)],
                                     DdmConfig(mode="optimal", tol=1e-6))
    path = tmp_path / "h.csv"
    hist.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,sample,trace_increment,wall_ms_darcy,wall_ms_stokes"
    assert len(lines) == hist.n_iter + 1


def test_calibrate_tolerance_brackets_target():
    inc = np.array([1.0, 0.3, 0.2, 0.25, 0.05, 0.01])
    tol = ddm.calibrate_tolerance(inc, 5)
    assert tol == pytest.approx(np.sqrt(0.05 * 0.2))
    first = int(np.argmax(inc < tol)) + 1
    assert first == 5
    with pytest.raises(DdmInputError):
        ddm.calibrate_tolerance(inc, 1)


def test_observed_ratio_of_geometric_sequence():
    inc = 0.5 ** np.arange(12)[:, None] * np.array([1.0, 3.0])
    assert np.allclose(ddm.observed_ratio(inc), 0.5)


def test_contraction_diagnostics_reports_missing_bounds(spaces8):
    cases = [oracle.test1_case(k) for k in (0.1, 0.1, 0.1, 20.0)]
    stats = ddm.ensemble_context_stats(spaces8, cases, 1.0)
    rep = ddm.contraction_diagnostics(None, stats, DdmConfig(), 1.0, 1.0, h=1 / 8)
    assert rep.E is None and rep.reasons
    cases = [oracle.test1_case(k) for k in TEST1_K]
    stats = ddm.ensemble_context_stats(spaces8, cases, 1.0)
    rep = ddm.contraction_diagnostics(None, stats, DdmConfig(), 0.5, 1.0)
    assert rep.E is not None and 0 < rep.E < 1
    assert rep.E_h is None
