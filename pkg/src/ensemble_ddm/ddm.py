"""Ensemble Robin-Robin domain decomposition for the coupled problem.

All samples share one Stokes and one Darcy operator built from the
ensemble means of the tangential friction ``eta`` and of the conductivity
``K``.  Sample fluctuations move to the right-hand side with the previous
iterate, so each iteration costs one multi-RHS solve per subdomain.
Samples are stored as columns throughout.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .linalg import Factorization, factorization_count, factorize
from .oracle import ManufacturedCase, SolutionFields, element_conductivity, sample_loads
from .randfield import EnsembleStats, assumption_check, ensemble_stats

log = logging.getLogger(__name__)

MODES = ("fixed", "optimal", "per_sample")


class DdmInputError(ValueError):
    pass


def update_coefficients(gamma_f: float, gamma_p: float):
    """(a, b, c, d) of the trace updates."""
    if not (gamma_f > 0 and gamma_p > 0):
        raise DdmInputError(f"Robin parameters must be positive, got {gamma_f}, {gamma_p}")
    r = gamma_f / gamma_p
    return r, -1.0 - r, -1.0, gamma_f + gamma_p


def trace_update(delta_f, delta_p, un, phi, coeffs, g: float):
    """delta_f' = a delta_p + b g phi, delta_p' = c delta_f + d u.n_f."""
    shapes = {np.shape(delta_f), np.shape(delta_p), np.shape(un), np.shape(phi)}
    if len(shapes) != 1:
        raise DdmInputError(f"trace length mismatch: {sorted(shapes)}")
    a, b, c, d = coeffs
    return (a * np.asarray(delta_p) + b * g * np.asarray(phi),
            c * np.asarray(delta_f) + d * np.asarray(un))


def optimal_robin_parameters(mu_f: float, det_kbar: float, length: float, h: float):
    """Optimized Robin pair from the frequency range [pi/L', pi/h].

    The product of the pair is ``2 mu_f / |K|``; the smaller member is
    recovered from that product to avoid cancellation.
    """
    for name, v in dict(mu_f=mu_f, det_kbar=det_kbar, length=length, h=h).items():
        if not v > 0:
            raise DdmInputError(f"{name} must be positive, got {v}")
    smin, smax = np.pi / length, np.pi / h
    t = (1.0 - 2.0 * mu_f * det_kbar * smin * smax) / (det_kbar * (smin + smax))
    s = 2.0 * mu_f / det_kbar
    r = np.sqrt(t * t + s)
    if t >= 0:
        gf = t + r
        gp = s / gf
    else:
        gp = r - t
        gf = s / gp
    return float(gf), float(gp)


@dataclass
class DdmConfig:
    """Iteration settings.

    ``mode='optimal'`` computes one Robin pair from the ensemble-mean
    conductivity; ``'per_sample'`` computes a pair per sample (samples
    with equal pairs share operators); ``'fixed'`` uses ``gamma_f``,
    ``gamma_p`` as given.
    """

    gamma_f: float = 1.0
    gamma_p: float = 1.0
    mode: str = "fixed"
    tol: float = 1e-8
    max_iter: int = 200
    nu: float = 1.0
    g: float = 1.0
    alpha: float = 1.0
    mu_f: float | None = None
    C_f: float = 1.0
    C_p: float = 1.0
    det_mode: str = "determinant"
    h_optimal: float | None = None
    allow_gamma_f_gt_gamma_p: bool = False
    floor: float = 1e-30
    track_velocity: bool = True
    warn_divergence: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise DdmInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.det_mode not in ("determinant", "k22"):
            raise DdmInputError("det_mode must be 'determinant' or 'k22'")
        if not (self.tol > 0 and self.max_iter >= 1):
            raise DdmInputError("tol must be positive and max_iter >= 1")
        if not (self.nu > 0 and self.g > 0 and self.alpha > 0):
            raise DdmInputError("nu, g and alpha must be positive")
        if self.mode == "fixed":
            update_coefficients(self.gamma_f, self.gamma_p)
            if self.gamma_f > self.gamma_p:
                msg = (f"gamma_f={self.gamma_f:g} > gamma_p={self.gamma_p:g}: "
                       "outside the convergence theory")
                if not self.allow_gamma_f_gt_gamma_p:
                    raise DdmInputError(msg + " (set allow_gamma_f_gt_gamma_p)")
                log.warning(msg)

    @property
    def mu(self) -> float:
        return self.nu if self.mu_f is None else self.mu_f


@dataclass
class IterationHistory:
    """Per-iteration records of a shared ensemble loop.

    ``increments[n, j]`` is the relative trace increment of sample ``j``
    after iteration ``n + 1``; ``iterations[j]`` is the first iteration at
    which it fell below the tolerance (``-1`` if never).
    """

    increments: np.ndarray
    abs_increments: np.ndarray
    velocity_change: np.ndarray
    wall_ms_darcy: np.ndarray
    wall_ms_stokes: np.ndarray
    iterations: np.ndarray
    gammas: np.ndarray
    n_factorizations: int
    factor_time: float
    setup_time: float
    solve_time: float
    diverged: bool = False
    tol: float = 1e-8
    extra: dict = field(default_factory=dict)

    @property
    def n_iter(self) -> int:
        return self.increments.shape[0]

    @property
    def converged(self) -> bool:
        return not self.diverged

    @property
    def total_time(self) -> float:
        return self.setup_time + self.factor_time + self.solve_time

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "sample", "trace_increment", "wall_ms_darcy",
                        "wall_ms_stokes"])
            for n in range(self.n_iter):
                for j in range(self.increments.shape[1]):
                    w.writerow([n + 1, j, f"{self.increments[n, j]:.6e}",
                                f"{self.wall_ms_darcy[n]:.3f}",
                                f"{self.wall_ms_stokes[n]:.3f}"])


# --------------------------------------------------------------------------
# ensemble data


@dataclass
class EnsembleData:
    """Per-sample quantities (columns) and their means, fixed during iteration."""

    spaces: fem.Spaces
    cases: list
    k11: np.ndarray          # (T_p, J) element integrals
    k22: np.ndarray
    eta: np.ndarray          # (n_quad_gamma, J)
    Fu: np.ndarray           # (n_vel, J)
    Fp: np.ndarray           # (n_head, J)
    uD: np.ndarray
    phiD: np.ndarray
    stats: EnsembleStats

    @property
    def J(self) -> int:
        return self.k11.shape[1]

    @property
    def k11_bar(self):
        return self.k11.mean(axis=1)

    @property
    def k22_bar(self):
        return self.k22.mean(axis=1)

    @property
    def eta_bar(self):
        return self.eta.mean(axis=1)


def _stat_points(spaces: fem.Spaces):
    geo = spaces.head.geo
    centroids = geo.points.reshape(geo.n_triangles, -1, 2).mean(axis=1)
    ygrid = np.linspace(-1.0, 0.0, 201)
    column = np.column_stack([np.full_like(ygrid, np.pi / 2), ygrid])
    return np.vstack([centroids, column])


def prepare_ensemble(spaces: fem.Spaces, cases, alpha: float) -> EnsembleData:
    if len(cases) == 0:
        raise DdmInputError("ensemble needs at least one sample")
    xi, yi = spaces.trace.points.T
    cols = {k: [] for k in ("k11", "k22", "eta", "Fu", "Fp", "uD", "phiD")}
    for case in cases:
        k11, k22 = element_conductivity(spaces, case.sample)
        Fu, Fp, uD, phiD = sample_loads(spaces, case)
        eta = alpha / np.sqrt(case.sample.k11(xi, yi))
        for k, v in zip(cols, (k11, k22, eta, Fu, Fp, uD, phiD)):
            cols[k].append(v)
    arrays = {k: np.column_stack(v) for k, v in cols.items()}
    stats = ensemble_stats([c.sample for c in cases], alpha, _stat_points(spaces),
                           spaces.trace.points)
    return EnsembleData(spaces=spaces, cases=list(cases), stats=stats, **arrays)


def mean_conductivity_determinant(data: EnsembleData, det_mode: str = "determinant",
                                  columns=None) -> float:
    """Area average of det(K_bar) (or of k22_bar) over the porous domain."""
    area = data.spaces.head.geo.area
    cols = slice(None) if columns is None else columns
    k11 = data.k11[:, cols].mean(axis=1) / area
    k22 = data.k22[:, cols].mean(axis=1) / area
    vals = k22 if det_mode == "k22" else k11 * k22
    return float((vals * area).sum() / area.sum())


def robin_pairs(data: EnsembleData, config: DdmConfig) -> np.ndarray:
    """(J, 2) Robin parameters per sample."""
    J = data.J
    if config.mode == "fixed":
        return np.tile([config.gamma_f, config.gamma_p], (J, 1))
    spaces = data.spaces
    h = config.h_optimal
    if h is None:
        h = spaces.h_nominal
    length = spaces.trace.imap.length
    if config.mode == "optimal":
        det = mean_conductivity_determinant(data, config.det_mode)
        return np.tile(optimal_robin_parameters(config.mu, det, length, h), (J, 1))
    return np.array([optimal_robin_parameters(
        config.mu, mean_conductivity_determinant(data, config.det_mode, [j]), length, h)
        for j in range(J)])


# --------------------------------------------------------------------------
# solver


@dataclass
class _Group:
    """Samples sharing one operator pair."""

    columns: np.ndarray
    gamma_f: float
    gamma_p: float
    stokes: object
    darcy: object
    fs: Factorization
    fd: Factorization


def _build_group(data, columns, gf, gp, config, k11, k22, eta):
    spaces = data.spaces
    S = fem.assemble_stokes_operator(spaces, config.nu, gf, eta)
    D = fem.assemble_darcy_operator(spaces, gp, k11, k22, config.g)
    return _Group(np.asarray(columns), gf, gp, S, D, factorize(S), factorize(D))


def _iterate(data: EnsembleData, groups, config: DdmConfig, k11_op, k22_op, eta_op,
             t_setup: float, n_fact: int, factor_time: float, init=None):
    """Shared loop over all samples.

    ``k11_op``/``k22_op``/``eta_op`` hold, per column, the coefficients the
    operators were built with; the remainders are lagged on the right-hand
    side.
    """
    spaces = data.spaces
    vel, pres, head, tr = spaces.velocity, spaces.pressure, spaces.head, spaces.trace
    J = data.J
    g = config.g
    nu_, np_ = vel.ndof, pres.ndof

    dk11 = data.k11 - k11_op
    dk22 = data.k22 - k22_op
    deta = data.eta - eta_op
    lagged_darcy = bool(np.any(dk11 != 0) or np.any(dk22 != 0))
    lagged_stokes = bool(np.any(deta != 0))
    Dx, Dy = head.grad_at_element
    E = tr.value_at_quad
    w = tr.weights
    St = spaces.select_u1
    Sun, Sphi = spaces.select_un, spaces.select_phi
    Cs, Cd = spaces.couple_stokes, spaces.couple_darcy
    Z = tr.interior[:, None]

    u = np.zeros((nu_, J))
    p = np.zeros((np_, J))
    phi = np.zeros((head.ndof, J))
    u[vel.dirichlet] = data.uD
    phi[head.dirichlet] = data.phiD
    delta_f = np.zeros((tr.n, J))
    delta_p = np.zeros((tr.n, J))
    if init is not None:
        u, phi, delta_f, delta_p = (np.array(a, dtype=float, copy=True) for a in init)

    # constant right-hand-side parts per group, restricted to free rows
    const_s, const_d = [], []
    for grp in groups:
        c = grp.columns
        rs = np.vstack([data.Fu[:, c], np.zeros((np_, len(c)))])
        const_s.append(rs[grp.stokes.free] - grp.stokes.lift(data.uD[:, c]))
        const_d.append(grp.gamma_p * data.Fp[:, c][grp.darcy.free]
                       - grp.darcy.lift(data.phiD[:, c]))
    gp_col = np.empty(J)
    coeffs = np.empty((4, J))
    for grp in groups:
        gp_col[grp.columns] = grp.gamma_p
        coeffs[:, grp.columns] = np.array(update_coefficients(grp.gamma_f, grp.gamma_p))[:, None]

    Mv = vel.mass if config.track_velocity else None
    incs, abs_incs, vchg, tdar, tsto = [], [], [], [], []
    first = np.full(J, -1)
    diverged = False
    t_solve = 0.0
    for n in range(config.max_iter):
        # Darcy: one multi-RHS solve per group
        t0 = time.perf_counter()
        rhs_d = Cd @ delta_p
        if lagged_darcy:
            gx, gy = Dx @ phi, Dy @ phi
            rhs_d -= gp_col * (Dx.T @ (dk11 * gx) + Dy.T @ (dk22 * gy))
        phi_new = np.empty_like(phi)
        for grp, cd in zip(groups, const_d):
            c = grp.columns
            x = grp.fd.solve_many(rhs_d[:, c][grp.darcy.free] + cd)
            phi_new[:, c] = grp.darcy.expand(x, data.phiD[:, c])
        t1 = time.perf_counter()

        # Stokes
        rhs_u = Cs @ delta_f
        if lagged_stokes:
            rhs_u -= St.T @ (E.T @ (w[:, None] * deta * (E @ (St @ u))))
        u_new = np.empty_like(u)
        for grp, cs in zip(groups, const_s):
            c = grp.columns
            full = np.vstack([rhs_u[:, c], np.zeros((np_, len(c)))])
            x = grp.fs.solve_many(full[grp.stokes.free] + cs)
            sol = grp.stokes.expand(x, data.uD[:, c])
            u_new[:, c] = sol[:nu_]
            p[:, c] = sol[nu_:]
        t2 = time.perf_counter()

        un = Z * (Sun @ u_new)
        ph = Z * (Sphi @ phi_new)
        a, b, cc, d = coeffs
        df_new = a * delta_p + b * g * ph
        dp_new = cc * delta_f + d * un

        num = tr.norm(df_new - delta_f) + tr.norm(dp_new - delta_p)
        den = tr.norm(df_new) + tr.norm(dp_new) + config.floor
        inc = num / den
        if Mv is not None:
            du = u_new - u
            vchg.append(np.sqrt(np.maximum((du * (Mv @ du)).sum(axis=0), 0.0)))
        u, phi, delta_f, delta_p = u_new, phi_new, df_new, dp_new
        incs.append(inc)
        abs_incs.append(num)
        tdar.append(1e3 * (t1 - t0))
        tsto.append(1e3 * (t2 - t1))
        t_solve += time.perf_counter() - t0

        newly = (first < 0) & (inc < config.tol)
        first[newly] = n + 1
        if not np.all(np.isfinite(inc)):
            diverged = True
            log.warning("iteration %d: non-finite trace increment", n + 1)
            break
        if np.all(first > 0):
            break
    else:
        diverged = bool(np.any(first < 0))
    if diverged and config.warn_divergence:
        log.warning("ensemble DDM did not converge for %d of %d samples in %d iterations",
                    int(np.sum(first < 0)), J, len(incs))

    gammas = np.empty((J, 2))
    for grp in groups:
        gammas[grp.columns] = (grp.gamma_f, grp.gamma_p)
    hist = IterationHistory(
        increments=np.array(incs), abs_increments=np.array(abs_incs),
        velocity_change=np.array(vchg) if vchg else np.zeros((0, J)),
        wall_ms_darcy=np.array(tdar), wall_ms_stokes=np.array(tsto),
        iterations=first, gammas=gammas, n_factorizations=n_fact,
        factor_time=factor_time, setup_time=t_setup, solve_time=t_solve,
        diverged=diverged, tol=config.tol)
    sol = SolutionFields(spaces, u, p, phi,
                         extra={"delta_f": delta_f, "delta_p": delta_p})
    return sol, hist


def ensemble_ddm_solve(spaces: fem.Spaces, cases, config: DdmConfig | None = None,
                       data: EnsembleData | None = None, init=None):
    """Run the ensemble iteration for all ``cases`` (one per sample).

    Returns the per-sample fields (columns) and the iteration history.
    Exactly one Stokes and one Darcy factorization are made per distinct
    Robin pair (one pair unless ``mode='per_sample'``).
    """
    config = config or DdmConfig()
    t0 = time.perf_counter()
    if data is None:
        data = prepare_ensemble(spaces, cases, config.alpha)
    assumption_check(data.stats)
    pairs = robin_pairs(data, config)
    if np.any(pairs[:, 0] > pairs[:, 1]):
        log.warning("gamma_f > gamma_p for some samples: outside the convergence theory")
    k11b, k22b, etab = data.k11_bar, data.k22_bar, data.eta_bar
    t_setup = time.perf_counter() - t0

    keys = [tuple(p) for p in pairs]
    groups = []
    n0 = factorization_count()
    t1 = time.perf_counter()
    for key in dict.fromkeys(keys):
        cols = [j for j, k in enumerate(keys) if k == key]
        groups.append(_build_group(data, cols, key[0], key[1], config, k11b, k22b, etab))
    factor_time = time.perf_counter() - t1
    n_fact = factorization_count() - n0
    J = data.J
    return _iterate(data, groups, config,
                    np.repeat(k11b[:, None], J, 1), np.repeat(k22b[:, None], J, 1),
                    np.repeat(etab[:, None], J, 1), t_setup, n_fact, factor_time, init)


def traditional_ddm_solve(spaces: fem.Spaces, case: ManufacturedCase,
                          config: DdmConfig | None = None):
    """Per-sample iteration with sample-specific operators (two factorizations)."""
    config = config or DdmConfig()
    if config.mode == "per_sample":
        config = replace(config, mode="optimal")
    return ensemble_ddm_solve(spaces, [case], config)


def traditional_batch(spaces: fem.Spaces, cases, config: DdmConfig | None = None,
                      callback=None):
    """Run :func:`traditional_ddm_solve` sample by sample.

    ``callback(j, solution, history, elapsed)`` receives the cumulative
    wall-clock time after each sample.
    """
    out = []
    t0 = time.perf_counter()
    for j, case in enumerate(cases):
        sol, hist = traditional_ddm_solve(spaces, case, config)
        out.append((sol, hist))
        if callback is not None:
            callback(j, sol, hist, time.perf_counter() - t0)
    return out


# --------------------------------------------------------------------------
# diagnostics


def compatibility_residual(sol: SolutionFields, gamma_f: float, gamma_p: float,
                           g: float) -> np.ndarray:
    """Relative mismatch of the converged Robin data with
    ``gamma_f u.n - g phi`` and ``gamma_p u.n + g phi`` per sample."""
    spaces = sol.spaces
    tr = spaces.trace
    u = sol.u if sol.u.ndim == 2 else sol.u[:, None]
    phi = sol.phi if sol.phi.ndim == 2 else sol.phi[:, None]
    un = tr.project(spaces.select_un @ u)
    ph = tr.project(spaces.select_phi @ phi)
    df, dp = sol.extra["delta_f"], sol.extra["delta_p"]
    rf = tr.norm(df - (gamma_f * un - g * ph)) / (tr.norm(df) + 1e-30)
    rp = tr.norm(dp - (gamma_p * un + g * ph)) / (tr.norm(dp) + 1e-30)
    return np.maximum(rf, rp)


@dataclass
class ContractionReport:
    observed: np.ndarray
    E: float | None
    E_h: float | None
    terms: dict
    reasons: list


def observed_ratio(increments: np.ndarray, tail: int = 5, floor: float = 1e-13) -> np.ndarray:
    """Geometric mean ratio of successive increments over the last ``tail``
    steps above ``floor`` (per sample)."""
    inc = np.atleast_2d(np.asarray(increments, dtype=float))
    if inc.shape[0] < 2:
        return np.full(inc.shape[1], np.nan)
    out = np.empty(inc.shape[1])
    for j in range(inc.shape[1]):
        seq = inc[:, j]
        seq = seq[seq > floor]
        seq = seq[-(tail + 1):]
        if len(seq) < 2:
            out[j] = np.nan
            continue
        out[j] = float(np.exp(np.mean(np.log(seq[1:] / seq[:-1]))))
    return out


def contraction_diagnostics(history: IterationHistory | None, stats: EnsembleStats,
                            config: DdmConfig, gamma_f: float | None = None,
                            gamma_p: float | None = None, h: float | None = None):
    """Observed ratio and theoretical bounds E (mesh independent) and E_h.

    Bounds whose denominators are not positive are reported as ``None``
    with the reason.
    """
    gf = config.gamma_f if gamma_f is None else gamma_f
    gp = config.gamma_p if gamma_p is None else gamma_p
    reasons = []
    observed = (observed_ratio(history.increments) if history is not None
                and history.n_iter > 1 else np.array([]))
    r = gf / gp
    eta_bar = float(stats.eta_bar.min())
    eta_term = 0.0
    for em in stats.eta_max_j:
        den = 2 * eta_bar - em
        if den <= 0:
            eta_term = None
            reasons.append("2 eta_bar - eta'_max <= 0")
            break
        eta_term += em / den
    rho = stats.rho_max
    kmin = stats.kbar_min
    den = (2 * kmin - rho) - config.g * config.C_p * (1 / gf - 1 / gp)
    k_term = rho / den if den > 0 else None
    if den <= 0:
        reasons.append("conductivity denominator of E <= 0")
    terms = {"r": r, "branch1": 2 * r * r / (1 + r * r), "branch2": (1 + r * r) / 2,
             "eta": eta_term, "k": k_term}
    E = None
    if eta_term is not None and k_term is not None:
        E = max(terms["branch1"], terms["branch2"], eta_term, k_term)

    E_h = None
    if np.isclose(gf, gp) and h is not None:
        nu = config.nu
        X = 2 * nu * h * (2 * nu + config.C_f * gf / (2 * nu) * np.sqrt(h)) ** -2
        dk = 2 * kmin - rho
        if X < 1 and dk > 0 and eta_term is not None:
            E_h = max(1 - X / (1 - X), 1 - X, eta_term, rho / dk)
            terms["X"] = X
        else:
            reasons.append("E_h hypotheses violated")
    elif not np.isclose(gf, gp):
        reasons.append("E_h only defined for gamma_f = gamma_p")
    return ContractionReport(observed, E, E_h, terms, reasons)


def ensemble_context_stats(spaces: fem.Spaces, cases, alpha: float) -> EnsembleStats:
    return ensemble_stats([c.sample for c in cases], alpha, _stat_points(spaces),
                          spaces.trace.points)


def calibrate_tolerance(increments, target: int) -> float:
    """Tolerance at which a sample with this increment sequence first passes
    after exactly ``target`` iterations (geometric midpoint of the bracket)."""
    inc = np.asarray(increments, dtype=float)
    if not 2 <= target <= len(inc):
        raise DdmInputError(f"target {target} outside the recorded history")
    lo, hi = inc[target - 1], inc[:target - 1].min()
    if not lo < hi:
        raise DdmInputError("increments do not bracket the target iteration")
    return float(np.sqrt(lo * hi))
