"""Monte Carlo and multilevel Monte Carlo estimates of solution means.

Velocity statistics use the piecewise-linear part of the MINI field only;
bubble coefficients are element-local and are not carried across levels.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from . import fem
from .ddm import DdmConfig, ensemble_ddm_solve
from .mesh import MeshError, TriMesh, coupled_hierarchy
from .oracle import test2_case
from .randfield import (STREAM_REFERENCE, STREAM_SAMPLES, RandomFieldParams,
                        rng_for, sample_conductivity)

log = logging.getLogger(__name__)

COUPLINGS = ("coupled", "shared", "uncoupled")


# --------------------------------------------------------------------------
# prolongation


def _locate(coarse: TriMesh, points: np.ndarray, k: int = 12, eps: float = 1e-10):
    """(triangle index, barycentric coordinates) of each point in ``coarse``."""
    V, T = coarse.vertices, coarse.triangles
    p0, p1, p2 = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    det = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
           - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))
    tree = cKDTree((p0 + p1 + p2) / 3.0)
    n = len(points)
    tri = np.full(n, -1)
    bary = np.zeros((n, 3))
    todo = np.arange(n)
    while len(todo):
        kk = min(k, len(T))
        _, cand = tree.query(points[todo], k=kk)
        cand = np.atleast_2d(cand.reshape(len(todo), -1))
        q = points[todo][:, None, :]
        a, b, c = p0[cand], p1[cand], p2[cand]
        d = det[cand]
        l1 = ((q[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
              - (c[..., 0] - a[..., 0]) * (q[..., 1] - a[..., 1])) / d
        l2 = ((b[..., 0] - a[..., 0]) * (q[..., 1] - a[..., 1])
              - (q[..., 0] - a[..., 0]) * (b[..., 1] - a[..., 1])) / d
        l0 = 1.0 - l1 - l2
        inside = (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
        hit = inside.any(axis=1)
        first = inside.argmax(axis=1)
        rows = np.flatnonzero(hit)
        idx = todo[rows]
        sel = first[rows]
        tri[idx] = cand[rows, sel]
        bary[idx] = np.column_stack([l0[rows, sel], l1[rows, sel], l2[rows, sel]])
        todo = todo[~hit]
        if len(todo) and kk == len(T):
            raise MeshError(f"{len(todo)} points lie outside the coarse mesh")
        k *= 4
    return tri, bary


_PROLONG_CACHE: dict = {}


def prolongation_matrix(coarse: TriMesh, fine: TriMesh) -> sp.csr_matrix:
    """P1 nodal interpolation from ``coarse`` to ``fine`` vertices.

    Raises :class:`MeshError` unless every fine triangle lies inside a
    single coarse triangle.
    """
    key = (id(coarse), id(fine))
    hit = _PROLONG_CACHE.get(key)
    if hit is not None and hit[0] is coarse and hit[1] is fine:
        return hit[2]
    tri, bary = _locate(coarse, fine.vertices)
    # nestedness: centroid and all vertices of each fine triangle in one coarse triangle
    cen = fine.vertices[fine.triangles].mean(axis=1)
    ctri, _ = _locate(coarse, cen)
    V, T = coarse.vertices, coarse.triangles
    for corner in range(3):
        q = fine.vertices[fine.triangles[:, corner]]
        p0, p1, p2 = (V[T[ctri, i]] for i in range(3))
        det = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
               - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))
        l1 = ((q[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
              - (p2[:, 0] - p0[:, 0]) * (q[:, 1] - p0[:, 1])) / det
        l2 = ((p1[:, 0] - p0[:, 0]) * (q[:, 1] - p0[:, 1])
              - (q[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])) / det
        if np.any(np.minimum(np.minimum(l1, l2), 1 - l1 - l2) < -1e-9):
            raise MeshError("meshes are not nested")
    bary[np.abs(bary) < 1e-13] = 0.0
    rows = np.repeat(np.arange(len(tri)), 3)
    P = sp.csr_matrix((bary.ravel(), (rows, T[tri].ravel())),
                      shape=(fine.n_vertices, coarse.n_vertices))
    P.eliminate_zeros()
    _PROLONG_CACHE[key] = (coarse, fine, P)
    return P


def velocity_prolongation(coarse: fem.VelocitySpace, fine: fem.VelocitySpace):
    """Nodal parts component-wise; bubbles dropped."""
    P = prolongation_matrix(coarse.mesh, fine.mesh)
    Pe = sp.bmat([[P, sp.csr_matrix((P.shape[0], coarse.block - coarse.n_nodes))],
                  [sp.csr_matrix((fine.block - fine.n_nodes, coarse.n_nodes)),
                   sp.csr_matrix((fine.block - fine.n_nodes, coarse.block - coarse.n_nodes))]])
    return sp.block_diag([Pe, Pe]).tocsr()


def prolong(values: np.ndarray, coarse, fine) -> np.ndarray:
    """Embed a coarse FE field (or columns of fields) into a nested fine space."""
    if isinstance(coarse, fem.VelocitySpace) != isinstance(fine, fem.VelocitySpace):
        raise fem.SpaceMismatch("cannot prolong between different field kinds")
    if np.shape(values)[0] != coarse.ndof:
        raise fem.SpaceMismatch("field does not match the coarse space")
    if coarse.mesh is fine.mesh:
        return (coarse.p1_part(values) if isinstance(coarse, fem.VelocitySpace)
                else np.array(values, copy=True))
    if isinstance(coarse, fem.VelocitySpace):
        return velocity_prolongation(coarse, fine) @ values
    return prolongation_matrix(coarse.mesh, fine.mesh) @ values


# --------------------------------------------------------------------------
# fields and errors


@dataclass
class MeanFields:
    """Mean velocity (P1 part), pressure and head on one level."""

    spaces: fem.Spaces
    u: np.ndarray
    p: np.ndarray
    phi: np.ndarray

    def prolong_to(self, spaces: fem.Spaces) -> "MeanFields":
        return MeanFields(spaces,
                          prolong(self.u, self.spaces.velocity, spaces.velocity),
                          prolong(self.p, self.spaces.pressure, spaces.pressure),
                          prolong(self.phi, self.spaces.head, spaces.head))

    def __sub__(self, other: "MeanFields") -> "MeanFields":
        return MeanFields(self.spaces, self.u - other.u, self.p - other.p,
                          self.phi - other.phi)

    def __add__(self, other: "MeanFields") -> "MeanFields":
        return MeanFields(self.spaces, self.u + other.u, self.p + other.p,
                          self.phi + other.phi)


ERROR_KEYS = ("err_u_L2", "err_u_H1", "err_p_L2", "err_phi_L2", "err_phi_H1")


def field_errors(estimate: MeanFields, reference: MeanFields) -> dict:
    """Absolute L2/H1 norms of ``estimate - reference`` on the reference level."""
    if estimate.spaces is not reference.spaces:
        estimate = estimate.prolong_to(reference.spaces)
    d = estimate - reference
    S = reference.spaces
    uL2, uH1 = fem.fe_norms(S.velocity, d.u)
    pL2, _ = fem.fe_norms(S.pressure, d.p)
    fL2, fH1 = fem.fe_norms(S.head, d.phi)
    return dict(zip(ERROR_KEYS, map(float, (uL2, uH1, pL2, fL2, fH1))))


def sample_mean(spaces: fem.Spaces, sol) -> MeanFields:
    """Column means in sample order."""
    J = sol.J
    u = spaces.velocity.p1_part(sol.u)
    mean = lambda a: (a.sum(axis=1) / J) if a.ndim == 2 else a.copy()
    return MeanFields(spaces, mean(u), mean(sol.p), mean(sol.phi))


def fit_rate(xs, ys) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.size < 2:
        raise ValueError("need at least two (x, y) pairs of equal length")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("rate fitting needs positive data")
    lx, ly = np.log(xs), np.log(ys)
    lx0 = lx - lx.mean()
    return float((lx0 * (ly - ly.mean())).sum() / (lx0 * lx0).sum())


# --------------------------------------------------------------------------
# sample sources


@dataclass(frozen=True)
class Test2Source:
    """Random-conductivity Test 2 cases keyed by (level, sample, stream)."""

    params: RandomFieldParams = RandomFieldParams()
    seed: int = 0
    nu: float = 1.0
    g: float = 1.0
    alpha: float = 1.0

    def __call__(self, level: int, j: int, stream: int = STREAM_SAMPLES):
        s = sample_conductivity(self.params, self.seed, level, j, stream)
        return test2_case(s, nu=self.nu, g=self.g, alpha=self.alpha)

    def key(self) -> dict:
        p = self.params
        return dict(a0=p.a0, sigma=p.sigma, Lc=p.corr_length, nf=p.n_terms,
                    seed=self.seed, nu=self.nu, g=self.g, alpha=self.alpha)


# --------------------------------------------------------------------------
# estimators


@dataclass
class EstimateReport:
    mean: MeanFields
    errors: dict | None
    levels: list = field(default_factory=list)
    wall_ms: float = 0.0
    n_factorizations: int = 0
    diverged: bool = False
    rates: dict = field(default_factory=dict)
    histories: list = field(default_factory=list)

    def write_levels_csv(self, path) -> None:
        cols = ["level", "h", "J", "wall_ms"] + list(ERROR_KEYS)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.levels:
                w.writerow([_fmt(row.get(c)) for c in cols])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{v:.6e}"
    return str(v)


def _solve_batch(spaces, cases, config: DdmConfig, chunk: int | None):
    """Ensemble solves over ``cases`` in chunks; returns summed fields."""
    chunk = chunk or len(cases)
    tot = None
    nfact, diverged, hists = 0, False, []
    for s in range(0, len(cases), chunk):
        sol, hist = ensemble_ddm_solve(spaces, cases[s:s + chunk], config)
        part = MeanFields(spaces, spaces.velocity.p1_part(sol.u).sum(axis=1),
                          sol.p.sum(axis=1), sol.phi.sum(axis=1))
        tot = part if tot is None else tot + part
        nfact += hist.n_factorizations
        diverged |= hist.diverged
        hists.append(hist)
    return tot, nfact, diverged, hists, sol


def _scale(m: MeanFields, c: float) -> MeanFields:
    return MeanFields(m.spaces, m.u * c, m.p * c, m.phi * c)


def mc_estimate(spaces: fem.Spaces, J: int, source: Callable, config: DdmConfig,
                reference: MeanFields | None = None, level: int = 0,
                stream: int = STREAM_SAMPLES, chunk: int | None = None,
                h: float | None = None) -> EstimateReport:
    """Plain Monte Carlo mean over ``J`` samples on one level."""
    if J < 1:
        raise ValueError("J must be at least 1")
    t0 = time.perf_counter()
    cases = [source(level, j, stream) for j in range(J)]
    tot, nfact, div, hists, _ = _solve_batch(spaces, cases, config, chunk)
    mean = _scale(tot, 1.0 / J)
    wall = 1e3 * (time.perf_counter() - t0)
    errors = field_errors(mean, reference) if reference is not None else None
    row = dict(level=level, h=h if h is not None else spaces.h_nominal, J=J, wall_ms=wall)
    row.update(errors or {})
    return EstimateReport(mean, errors, [row], wall, nfact, div, histories=hists)


@dataclass
class MlmcConfig:
    """Level schedule; ``spaces[l]`` must be nested and ``J[l]`` nonincreasing."""

    spaces: list
    J: list
    h: list | None = None
    seed: int = 0
    coupling: str = "coupled"

    def __post_init__(self):
        if len(self.spaces) != len(self.J) or not self.J:
            raise ValueError("need one sample count per level")
        if any(j < 1 for j in self.J):
            raise ValueError("sample counts must be positive")
        if any(b > a for a, b in zip(self.J, self.J[1:])):
            raise ValueError("sample counts must be nonincreasing in the level")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}")
        if self.h is None:
            self.h = [s.h_nominal for s in self.spaces]

    @property
    def L(self) -> int:
        return len(self.J) - 1


def mlmc_estimate(config: MlmcConfig, source: Callable, ddm_config: DdmConfig,
                  reference: MeanFields | None = None,
                  chunk: int | None = None) -> EstimateReport:
    """Telescoping estimate on the finest level.

    ``coupling='coupled'`` keys the random input of pair ``j`` on level
    ``l`` by ``(l, j)`` and uses it on both meshes of the pair;
    ``'shared'`` keys every level by ``(0, j)``; ``'uncoupled'`` takes the
    coarse term from a random selection of the previous level's solutions.
    """
    finest = config.spaces[-1]
    t_all = time.perf_counter()
    est = None
    rows, nfact, diverged, hists = [], 0, False, []
    prev_cols = None   # per-sample level-(l-1) sums for the uncoupled mode
    for l, (S, J) in enumerate(zip(config.spaces, config.J)):
        t0 = time.perf_counter()
        key = 0 if config.coupling == "shared" else l
        cases = [source(key, j) for j in range(J)]
        tot, nf, dv, hs, sol = _solve_batch(S, cases, ddm_config, chunk)
        nfact += nf
        diverged |= dv
        hists += hs
        fine_mean = _scale(tot, 1.0 / J)
        if l == 0:
            term = fine_mean.prolong_to(finest)
        else:
            Sc = config.spaces[l - 1]
            if config.coupling == "uncoupled":
                pick = rng_for(config.seed, l, 0, STREAM_REFERENCE).choice(
                    prev_cols.u.shape[1], size=J, replace=J > prev_cols.u.shape[1])
                coarse = MeanFields(Sc, prev_cols.u[:, pick].mean(axis=1),
                                    prev_cols.p[:, pick].mean(axis=1),
                                    prev_cols.phi[:, pick].mean(axis=1))
            else:
                ctot, nf, dv, hs, _ = _solve_batch(Sc, cases, ddm_config, chunk)
                nfact += nf
                diverged |= dv
                hists += hs
                coarse = _scale(ctot, 1.0 / J)
            term = fine_mean.prolong_to(finest) - coarse.prolong_to(finest)
        est = term if est is None else est + term
        if config.coupling == "uncoupled":
            if chunk and chunk < J:
                raise ValueError("uncoupled mode keeps all samples; do not chunk")
            prev_cols = MeanFields(S, S.velocity.p1_part(sol.u), sol.p, sol.phi)
        wall = 1e3 * (time.perf_counter() - t0)
        row = dict(level=l, h=config.h[l], J=J, wall_ms=wall)
        if reference is not None:
            row.update(field_errors(est, reference))
        rows.append(row)
    errors = field_errors(est, reference) if reference is not None else None
    wall = 1e3 * (time.perf_counter() - t_all)
    return EstimateReport(est, errors, rows, wall, nfact, diverged, histories=hists)


# --------------------------------------------------------------------------
# nested Test 2 levels and cached references


def test2_levels(h_coarsest: float = 0.25, n_levels: int = 4):
    """Spaces on nested meshes ``h_coarsest / 2**l``, l = 0..n_levels-1.

    All Test 2 experiments share this hierarchy so one reference serves
    every estimator.
    """
    out = []
    for fluid, porous, imap in coupled_hierarchy(h_coarsest, n_levels - 1):
        out.append(fem.build_spaces(fluid, porous, imap))
    return out


def level_for(h: float, h_coarsest: float = 0.25) -> int:
    l = np.log2(h_coarsest / h)
    if abs(l - round(l)) > 1e-9 or l < 0:
        raise ValueError(f"h={h} is not h_coarsest/2**l")
    return int(round(l))


def reference_key(spaces: fem.Spaces, J0: int, source, config: DdmConfig) -> str:
    payload = dict(shape=list(spaces.fluid_mesh.shape or ()),
                   nv=spaces.fluid_mesh.n_vertices, J0=J0, tol=config.tol,
                   mode=config.mode, gf=config.gamma_f, gp=config.gamma_p,
                   source=source.key() if hasattr(source, "key") else repr(source))
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def reference_mean(spaces: fem.Spaces, J0: int, source, config: DdmConfig,
                   cache_dir=None, chunk: int = 200) -> MeanFields:
    """Mean of ``J0`` solves on an independent stream, cached on disk."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"reference_{reference_key(spaces, J0, source, config)}.npz"
        if path.exists():
            d = np.load(path)
            return MeanFields(spaces, d["u"], d["p"], d["phi"])
    t0 = time.perf_counter()
    cases = [source(0, j, STREAM_REFERENCE) for j in range(J0)]
    tot, _, div, _, _ = _solve_batch(spaces, cases, config, chunk)
    if div:
        log.warning("reference solve did not converge for every sample")
    ref = _scale(tot, 1.0 / J0)
    log.info("reference with J0=%d computed in %.1f s", J0, time.perf_counter() - t0)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, u=ref.u, p=ref.p, phi=ref.phi)
    return ref
