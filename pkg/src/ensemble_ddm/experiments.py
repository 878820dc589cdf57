"""Experiment runners: each writes plot-ready CSV files into an output
directory and returns a summary dictionary for the run manifest."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import fem, uq
from .ddm import (DdmConfig, calibrate_tolerance, ensemble_ddm_solve, robin_pairs,
                  prepare_ensemble, traditional_batch)
from .linalg import factorization_count
from .mesh import build_coupled_meshes
from .oracle import strong_residual_check, test1_case, test2_case
from .randfield import RandomFieldParams, sample_uniform_constant

log = logging.getLogger(__name__)

EXPERIMENTS = ("table71", "fig71_sweep", "test2_mc", "test2_mlmc", "cpu_table74",
               "mass_conservation")


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list:
    try:
        return [float(Fraction(t.strip())) for t in str(text).split(",") if t.strip()]
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc


def _ints(text: str) -> list:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse integer list {text!r}") from exc


def _pairs(text: str) -> list:
    out = []
    for item in str(text).split(","):
        if not item.strip():
            continue
        a, sep, b = item.partition(":")
        if not sep:
            raise ConfigError(f"pair {item!r} must be written a:b")
        out.append((float(Fraction(a)), float(Fraction(b))))
    return out


@dataclass
class ExperimentConfig:
    """Flat settings shared by all experiments; defaults follow the
    published setup (nu = g = alpha = 1, z = 0, L_c = 0.25, a0 = 1,
    sigma = 0.15, n_f = 3)."""

    seed: int = 0
    nu: float = 1.0
    g: float = 1.0
    alpha: float = 1.0
    z: float = 0.0
    mu_f: str = ""
    robin_mode: str = "optimal"
    gamma_f: float = 1.0
    gamma_p: float = 1.0
    tol: str = "auto"
    test2_tol: float = 1e-8
    calibration_k: float = 4.11
    calibration_h: str = "1/32"
    calibration_itr: int = 7
    max_iter: int = 200
    C_f: float = 1.0
    C_p: float = 1.0
    det_mode: str = "determinant"
    # table71
    samples: str = "2.21,4.11,6.21"
    h_list: str = "1/16,1/32,1/64,1/128"
    error_tol: float = 1e-10
    # fig71_sweep
    sweep_h: str = "1/32"
    aniso_samples: str = "2.11:3.11,4.11:5.21,6.21:1.21"
    sweep_pairs: str = "0.1:0.1,0.1:1,0.1:10,0.5:2,1:1,1:10,10:10"
    # random field
    a0: float = 1.0
    sigma: float = 0.15
    corr_length: float = 0.25
    n_terms: int = 3
    h_coarsest: str = "1/4"
    # test2_mc
    mc_h: str = "1/32"
    J_list: str = "40,60,80,140,220"
    mc_replicas: int = 8
    J0: int = 1000
    chunk: int = 200
    cache_dir: str = ""
    # test2_mlmc
    mlmc_L: int = 2
    mlmc_h0: str = "1/8"
    mlmc_J: str = ""
    mc_compare_J: str = "60,80,512"
    coupling: str = "coupled"
    table73: bool = True
    table73_L: str = "1,2,3"
    # cpu_table74
    cpu_h: str = "1/64"
    cpu_J: str = "1,10,20,40,80,160"
    cpu_k_low: float = 1.0
    cpu_k_high: float = 2.0
    # mass_conservation
    mass_h: str = "1/8,1/16"
    mass_J: int = 10

    def validate(self) -> None:
        if self.z != 0.0:
            raise ConfigError("only z = 0 is supported (head equals scaled pressure)")
        if self.robin_mode not in ("optimal", "fixed", "per_sample"):
            raise ConfigError(f"unknown robin_mode {self.robin_mode!r}")
        if self.coupling not in uq.COUPLINGS:
            raise ConfigError(f"unknown coupling {self.coupling!r}")
        if self.tol != "auto":
            try:
                if not float(self.tol) > 0:
                    raise ValueError
            except ValueError as exc:
                raise ConfigError("tol must be 'auto' or a positive number") from exc
        for name in ("nu", "g", "alpha", "sigma", "corr_length", "a0"):
            if getattr(self, name) < 0 or (name != "sigma" and getattr(self, name) == 0):
                raise ConfigError(f"{name} must be positive")
        for name in ("h_list", "sweep_h", "mc_h", "mlmc_h0", "cpu_h", "mass_h",
                     "h_coarsest", "calibration_h"):
            if any(v <= 0 for v in _floats(getattr(self, name))):
                raise ConfigError(f"{name} must hold positive sizes")

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: f.type for f in dataclasses.fields(cls)}

    def updated(self, items: dict) -> "ExperimentConfig":
        types = self.field_types()
        kw = {}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "bool":
                    low = str(raw).strip().lower()
                    if low not in ("true", "false", "1", "0", "yes", "no"):
                        raise ValueError(raw)
                    kw[key] = low in ("true", "1", "yes")
                elif kind == "int":
                    kw[key] = int(raw)
                elif kind == "float":
                    kw[key] = float(Fraction(str(raw).strip()))
                else:
                    kw[key] = str(raw).strip()
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        cfg = dataclasses.replace(self, **kw)
        cfg.validate()
        return cfg

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def ddm(self, tol: float, **kw) -> DdmConfig:
        base = dict(gamma_f=self.gamma_f, gamma_p=self.gamma_p, mode=self.robin_mode,
                    tol=tol, max_iter=self.max_iter, nu=self.nu, g=self.g,
                    alpha=self.alpha, mu_f=float(self.mu_f) if self.mu_f else None,
                    C_f=self.C_f, C_p=self.C_p, det_mode=self.det_mode)
        base.update(kw)
        try:
            return DdmConfig(**base)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def field_params(self) -> RandomFieldParams:
        try:
            return RandomFieldParams(self.a0, self.sigma, self.corr_length, self.n_terms)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def source(self) -> uq.Test2Source:
        return uq.Test2Source(self.field_params(), self.seed, self.nu, self.g, self.alpha)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {n}: expected key = value")
        items[key.strip()] = value.strip()
    return items


# --------------------------------------------------------------------------
# helpers


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6e}"
    return str(v)


def _fmt_h(h: float) -> str:
    return f"{h:.10g}"


def spaces_for(h: float) -> fem.Spaces:
    return fem.build_spaces(*build_coupled_meshes(h))


def gate_cases(cases, tol: float = 1e-6) -> None:
    """Finite-difference residual gate for exact manufactured cases."""
    for case in cases:
        if not case.exact:
            continue
        res = strong_residual_check(case)
        bad = {k: v for k, v in res.items() if v > tol}
        if bad:
            raise RuntimeError(f"{case.name} fails the residual gate: {bad}")


def calibrated_tolerance(cfg: ExperimentConfig) -> tuple[float, dict]:
    """Tolerance giving ``calibration_itr`` iterations for the calibration
    sample of the Test 1 ensemble; computed once per run."""
    ks = _floats(cfg.samples)
    if cfg.calibration_k not in ks:
        raise ConfigError("calibration_k must be one of the Test 1 samples")
    h = _floats(cfg.calibration_h)[0]
    spaces = spaces_for(h)
    cases = [test1_case(k, nu=cfg.nu, g=cfg.g, alpha=cfg.alpha) for k in ks]
    dcfg = cfg.ddm(1e-13, max_iter=max(4 * cfg.calibration_itr, 40), track_velocity=False,
                   warn_divergence=False)
    _, hist = ensemble_ddm_solve(spaces, cases, dcfg)
    j = ks.index(cfg.calibration_k)
    tol = calibrate_tolerance(hist.increments[:, j], cfg.calibration_itr)
    return tol, dict(calibration_k=cfg.calibration_k, calibration_h=h,
                     calibration_itr=cfg.calibration_itr, tol=tol)


def resolve_tol(cfg: ExperimentConfig, test1: bool) -> tuple[float, dict]:
    if cfg.tol != "auto":
        return float(cfg.tol), {"tol": float(cfg.tol)}
    if test1:
        return calibrated_tolerance(cfg)
    return cfg.test2_tol, {"tol": cfg.test2_tol}


# --------------------------------------------------------------------------
# Test 1


TABLE71_COLUMNS = ["k", "h", "itr", "rel_u_L2", "rel_u_H1", "rel_p_L2", "rel_phi_L2",
                   "rel_phi_H1"]


def test1_errors(spaces, sol, case) -> tuple:
    eu = fem.compute_error(spaces.velocity, sol.u, case.u, case.grad_u)
    ep = fem.compute_error(spaces.pressure, sol.p, case.p, case.grad_p)
    ef = fem.compute_error(spaces.head, sol.phi, case.phi, case.grad_phi)
    # exact pressure is zero: its column is an absolute error
    return (eu.L2_rel, eu.H1_rel, ep.rel_or_abs()[0], ef.L2_rel, ef.H1_rel)


def first_passage(increments, tol: float) -> np.ndarray:
    """Per-sample first iteration with increment below ``tol`` (-1 if none)."""
    below = np.asarray(increments) < tol
    return np.where(below.any(axis=0), below.argmax(axis=0) + 1, -1)


def run_table71(cfg: ExperimentConfig, out: Path) -> dict:
    """Errors at the converged iterate (``error_tol``) with iteration counts
    taken as first passage of the calibrated ``tol`` in the same run."""
    tol, calib = resolve_tol(cfg, test1=True)
    ks = _floats(cfg.samples)
    cases = [test1_case(k, nu=cfg.nu, g=cfg.g, alpha=cfg.alpha) for k in ks]
    gate_cases(cases)
    rows = []
    summary = {"calibration": calib, "error_tol": cfg.error_tol, "gammas": {},
               "diverged": False}
    for h in _floats(cfg.h_list):
        spaces = spaces_for(h)
        sol, hist = ensemble_ddm_solve(spaces, cases, cfg.ddm(min(tol, cfg.error_tol)))
        hist.write_csv(out / f"table71_history_h{round(1 / h)}.csv")
        itr = first_passage(hist.increments, tol)
        summary["gammas"][_fmt_h(h)] = hist.gammas[0].tolist()
        summary["diverged"] |= bool(hist.diverged or np.any(itr < 0))
        for j, (k, case) in enumerate(zip(ks, cases)):
            errs = test1_errors(spaces, sol.sample(j), case)
            rows.append([f"{k:g}", _fmt_h(h), int(itr[j]), *errs])
        log.info("table71 h=%g done (iterations %s)", h, itr.tolist())
    _write_csv(out / "table71.csv", TABLE71_COLUMNS, rows)
    summary["rows"] = len(rows)
    return summary


def run_robin_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    tol, calib = resolve_tol(cfg, test1=True)
    h = _floats(cfg.sweep_h)[0]
    spaces = spaces_for(h)
    sets = {
        "isotropic": [(k, k) for k in _floats(cfg.samples)],
        "anisotropic": _pairs(cfg.aniso_samples),
    }
    it_rows, hist_rows = [], []
    summary = {"calibration": calib, "optimal": {}, "diverged": False}
    for name, ks in sets.items():
        cases = [test1_case(a, b, nu=cfg.nu, g=cfg.g, alpha=cfg.alpha) for a, b in ks]
        gate_cases(cases)
        data = prepare_ensemble(spaces, cases, cfg.alpha)
        opt = tuple(robin_pairs(data, cfg.ddm(tol, mode="optimal"))[0])
        summary["optimal"][name] = list(opt)
        pairs = [opt] + _pairs(cfg.sweep_pairs)
        for ip, (gf, gp) in enumerate(pairs):
            dcfg = cfg.ddm(tol, mode="fixed", gamma_f=gf, gamma_p=gp,
                           allow_gamma_f_gt_gamma_p=True)
            _, hist = ensemble_ddm_solve(spaces, cases, dcfg, data=data)
            summary["diverged"] |= hist.diverged
            for j, (a, b) in enumerate(ks):
                it_rows.append([name, ip, gf, gp, ip == 0, j, f"{a:g}", f"{b:g}",
                                int(hist.iterations[j])])
                for n in range(hist.n_iter):
                    hist_rows.append([name, ip, gf, gp, j, n + 1,
                                      hist.velocity_change[n, j], hist.increments[n, j]])
    _write_csv(out / "sweep_iterations.csv",
               ["set", "pair", "gamma_f", "gamma_p", "optimal", "sample", "k11", "k22",
                "itr"], it_rows)
    _write_csv(out / "sweep_histories.csv",
               ["set", "pair", "gamma_f", "gamma_p", "sample", "iter", "velocity_change",
                "trace_increment"], hist_rows)
    return summary


# --------------------------------------------------------------------------
# Test 2


def _levels(cfg: ExperimentConfig, finest_h: float):
    h0 = _floats(cfg.h_coarsest)[0]
    return uq.test2_levels(h0, uq.level_for(finest_h, h0) + 1), h0


def _cache_dir(cfg: ExperimentConfig, out: Path) -> Path:
    return Path(cfg.cache_dir) if cfg.cache_dir else out / "cache"


def _reference(cfg, spaces, tol, out):
    return uq.reference_mean(spaces, cfg.J0, cfg.source(), cfg.ddm(tol, track_velocity=False),
                             cache_dir=_cache_dir(cfg, out), chunk=cfg.chunk)


ERR_COLUMNS = list(uq.ERROR_KEYS)
MC_STREAM_BASE = 10
MC_REPLICA_STRIDE = 1000
COMPARE_STREAM_BASE = 20


def run_test2_mc(cfg: ExperimentConfig, out: Path) -> dict:
    """MC error against the cached reference for each J in ``J_list``.

    Each J is repeated ``mc_replicas`` times on independent streams and the
    reported error is the root mean square over the replicas, so the fitted
    slope estimates the rate of the expected error.
    """
    tol, _ = resolve_tol(cfg, test1=False)
    if cfg.mc_replicas < 1:
        raise ConfigError("mc_replicas must be at least 1")
    h = _floats(cfg.mc_h)[0]
    levels, _ = _levels(cfg, h)
    S = levels[-1]
    dcfg = cfg.ddm(tol, track_velocity=False)
    t0 = time.perf_counter()
    ref = _reference(cfg, S, tol, out)
    t_ref = time.perf_counter() - t0
    src = cfg.source()
    rows, rep_rows, errs, Js = [], [], [], _ints(cfg.J_list)
    diverged = False
    for i, J in enumerate(Js):
        per, wall = [], 0.0
        for r in range(cfg.mc_replicas):
            rep = uq.mc_estimate(S, J, src, dcfg, reference=ref,
                                 stream=MC_STREAM_BASE + i + MC_REPLICA_STRIDE * r,
                                 chunk=cfg.chunk, h=h)
            diverged |= rep.diverged
            wall += rep.wall_ms
            per.append([rep.errors[k] for k in ERR_COLUMNS])
            rep_rows.append([J, r, rep.wall_ms] + per[-1])
        rms = np.sqrt(np.mean(np.square(per), axis=0))
        rows.append([J, wall / cfg.mc_replicas] + rms.tolist())
        errs.append(rms)
    _write_csv(out / "mc_errors.csv", ["J", "wall_ms"] + ERR_COLUMNS, rows)
    _write_csv(out / "mc_replicas.csv", ["J", "replica", "wall_ms"] + ERR_COLUMNS, rep_rows)
    errs = np.array(errs)
    rates = {k: -uq.fit_rate(Js, errs[:, i]) for i, k in enumerate(ERR_COLUMNS)}
    _write_csv(out / "mc_rates.csv", ["quantity", "rate"], list(rates.items()))
    return {"rates": rates, "reference_seconds": t_ref, "diverged": diverged, "tol": tol,
            "replicas": cfg.mc_replicas}


def mlmc_schedule(L: int) -> list:
    return [2 ** (4 * (L - l) + 1) for l in range(L + 1)]


def run_test2_mlmc(cfg: ExperimentConfig, out: Path) -> dict:
    tol, _ = resolve_tol(cfg, test1=False)
    h0 = _floats(cfg.mlmc_h0)[0]
    L = cfg.mlmc_L
    h_fine = h0 / 2 ** L
    L73 = _ints(cfg.table73_L) if cfg.table73 else []
    levels, hc = _levels(cfg, h_fine)
    if L73:
        finest73 = _floats(cfg.h_coarsest)[0] / 2 ** max(L73)
        if finest73 < h_fine:
            levels, hc = _levels(cfg, finest73)
    S_ref = levels[-1]
    dcfg = cfg.ddm(tol, track_velocity=False)
    ref = _reference(cfg, S_ref, tol, out)
    src = cfg.source()
    diverged = False

    J = _ints(cfg.mlmc_J) if cfg.mlmc_J else mlmc_schedule(L)
    off = uq.level_for(h0, hc)
    try:
        mcfg = uq.MlmcConfig(levels[off:off + L + 1], J, seed=cfg.seed,
                             coupling=cfg.coupling)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rep = uq.mlmc_estimate(mcfg, src, dcfg, reference=ref, chunk=cfg.chunk
                           if cfg.coupling != "uncoupled" else None)
    diverged |= rep.diverged
    rep.write_levels_csv(out / "mlmc_levels.csv")
    label = "-".join(map(str, J))
    compare = [["MLMC " + label, sum(J), rep.wall_ms] + [rep.errors[k] for k in ERR_COLUMNS]]
    S_fine = levels[off + L]
    for i, Jc in enumerate(_ints(cfg.mc_compare_J)):
        mc = uq.mc_estimate(S_fine, Jc, src, dcfg, reference=ref,
                            stream=COMPARE_STREAM_BASE + i, chunk=cfg.chunk)
        diverged |= mc.diverged
        compare.append([f"MC {Jc}", Jc, mc.wall_ms] + [mc.errors[k] for k in ERR_COLUMNS])
    _write_csv(out / "mlmc_compare.csv", ["method", "J", "wall_ms"] + ERR_COLUMNS, compare)
    summary = {"mlmc_wall_ms": rep.wall_ms, "mlmc_errors": rep.errors,
               "compare": {r[0]: dict(zip(["J", "wall_ms"] + ERR_COLUMNS, r[1:]))
                           for r in compare}}

    conv = []
    for Lc in L73:
        sched = mlmc_schedule(Lc)
        r = uq.mlmc_estimate(uq.MlmcConfig(levels[:Lc + 1], sched, seed=cfg.seed,
                                           coupling=cfg.coupling),
                             src, dcfg, reference=ref,
                             chunk=cfg.chunk if cfg.coupling != "uncoupled" else None)
        diverged |= r.diverged
        conv.append([Lc, _fmt_h(levels[Lc].h_nominal), "-".join(map(str, sched)), r.wall_ms]
                    + [r.errors[k] for k in ERR_COLUMNS])
    if conv:
        _write_csv(out / "mlmc_convergence.csv",
                   ["L", "h_L", "J", "wall_ms"] + ERR_COLUMNS, conv)
        hs = [levels[Lc].h_nominal for Lc in L73]
        summary["convergence_rate_u_H1"] = (
            uq.fit_rate(hs, [c[4 + ERR_COLUMNS.index("err_u_H1")] for c in conv])
            if len(conv) > 1 else None)
    summary["diverged"] = diverged
    return summary


def run_cpu_compare(cfg: ExperimentConfig, out: Path) -> dict:
    tol, _ = resolve_tol(cfg, test1=False)
    h = _floats(cfg.cpu_h)[0]
    spaces = spaces_for(h)
    Js = sorted(_ints(cfg.cpu_J))
    cases = [test2_case(sample_uniform_constant(cfg.cpu_k_low, cfg.cpu_k_high, cfg.seed, j),
                        nu=cfg.nu, g=cfg.g, alpha=cfg.alpha) for j in range(Js[-1])]
    dcfg = cfg.ddm(tol, track_velocity=False)
    diverged = False

    trad = {}
    n0 = factorization_count()

    def record(j, sol, hist, elapsed):
        nonlocal diverged
        diverged |= hist.diverged
        if j + 1 in Js:
            trad[j + 1] = (elapsed, factorization_count() - n0)

    traditional_batch(spaces, cases, dcfg, callback=record)
    rows = []
    for J in Js:
        n1 = factorization_count()
        t0 = time.perf_counter()
        _, hist = ensemble_ddm_solve(spaces, cases[:J], dcfg)
        t_ens = time.perf_counter() - t0
        diverged |= hist.diverged
        rows.append([J, trad[J][0], t_ens, trad[J][1], factorization_count() - n1,
                     int(hist.iterations.max())])
        log.info("cpu J=%d traditional %.2fs ensemble %.2fs", J, trad[J][0], t_ens)
    _write_csv(out / "cpu_compare.csv",
               ["J", "traditional_s", "ensemble_s", "traditional_factorizations",
                "ensemble_factorizations", "ensemble_iterations"], rows)
    return {"rows": [dict(zip(["J", "traditional_s", "ensemble_s", "trad_fact",
                               "ens_fact", "itr"], r)) for r in rows],
            "diverged": diverged}


def run_mass_conservation(cfg: ExperimentConfig, out: Path) -> dict:
    tol, _ = resolve_tol(cfg, test1=False)
    hs = sorted(_floats(cfg.mass_h), reverse=True)
    levels, h0 = _levels(cfg, min(hs))
    src = cfg.source()
    cases = [src(0, j) for j in range(cfg.mass_J)]
    rows, maxima, diverged = [], [], False
    for h in hs:
        S = levels[uq.level_for(h, h0)]
        sol, hist = ensemble_ddm_solve(S, cases, cfg.ddm(tol, track_velocity=False))
        diverged |= hist.diverged
        mism = np.array([fem.interface_flux_mismatch(S, sol.u[:, j], sol.phi[:, j],
                                                     c.sample.k22).max()
                         for j, c in enumerate(cases)])
        rows.append([_fmt_h(h), len(cases), mism.max(), mism.mean()])
        maxima.append(float(mism.max()))
    _write_csv(out / "mass_conservation.csv", ["h", "J", "max_mismatch", "mean_mismatch"],
               rows)
    return {"max_mismatch": dict(zip(map(_fmt_h, hs), maxima)),
            "ratio": maxima[-1] / maxima[0] if len(maxima) > 1 else None,
            "diverged": diverged}


RUNNERS = {
    "table71": run_table71,
    "fig71_sweep": run_robin_sweep,
    "test2_mc": run_test2_mc,
    "test2_mlmc": run_test2_mlmc,
    "cpu_table74": run_cpu_compare,
    "mass_conservation": run_mass_conservation,
}
