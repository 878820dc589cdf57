"""Random hydraulic conductivity samples and ensemble statistics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

SQRT3 = np.sqrt(3.0)


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RandomFieldParams:
    """Truncated cosine/sine expansion in ``y`` with uniform coefficients."""

    a0: float = 1.0
    sigma: float = 0.15
    corr_length: float = 0.25
    n_terms: int = 3
    positivity_floor: float = 0.0

    def __post_init__(self):
        if not (self.a0 > 0 and self.sigma >= 0 and self.corr_length > 0
                and self.n_terms >= 0):
            raise ValueError(f"invalid random field parameters {self}")

    @property
    def n_coefficients(self) -> int:
        return 2 * self.n_terms + 1

    def worst_case_minimum(self) -> float:
        """Lower bound a0 - sigma*sqrt(3)*(sqrt(l0) + 2*sum sqrt(l_i))."""
        lam0, lam = kl_eigenvalues(self)
        return self.a0 - self.sigma * SQRT3 * (np.sqrt(lam0) + 2 * np.sqrt(lam).sum())


def kl_eigenvalues(params: RandomFieldParams):
    """(lambda_0, array of lambda_1..lambda_nf)."""
    Lc = params.corr_length
    lam0 = np.sqrt(np.pi * Lc) / 2.0
    i = np.arange(1, params.n_terms + 1)
    lam = np.sqrt(np.pi) * Lc * np.exp(-(i * np.pi * Lc) ** 2 / 4.0)
    return lam0, lam


STREAM_SAMPLES = 0
STREAM_REFERENCE = 1
STREAM_CONSTANT = 2


def rng_for(seed: int, level: int, j: int, stream: int = STREAM_SAMPLES):
    """Counter-based generator keyed by (seed, stream, level, sample)."""
    ss = np.random.SeedSequence([int(seed), int(stream), int(level), int(j)])
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


@dataclass(frozen=True, eq=False)
class ConductivitySample:
    """Diagonal conductivity diag(k11, k22) for one sample.

    Either spatially constant (``const`` set) or a y-only expansion with
    realized coefficients ``Y``.
    """

    j: int = 0
    const: tuple | None = None
    Y: np.ndarray | None = None
    params: RandomFieldParams | None = None
    _modes: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.Y is not None:
            lam0, lam = kl_eigenvalues(self.params)
            s = self.params.sigma
            n = self.params.n_terms
            c0 = self.params.a0 + s * np.sqrt(lam0) * self.Y[0]
            cc = s * np.sqrt(lam) * self.Y[1:n + 1]
            cs = s * np.sqrt(lam) * self.Y[n + 1:]
            object.__setattr__(self, "_modes", (c0, cc, cs))

    def _kl(self, y):
        c0, cc, cs = self._modes
        y = np.asarray(y, dtype=float)
        w = np.multiply.outer(y, np.arange(1, len(cc) + 1) * np.pi)
        return c0 + np.cos(w) @ cc + np.sin(w) @ cs

    def _kl_dy(self, y):
        c0, cc, cs = self._modes
        y = np.asarray(y, dtype=float)
        i = np.arange(1, len(cc) + 1) * np.pi
        w = np.multiply.outer(y, i)
        return -np.sin(w) @ (cc * i) + np.cos(w) @ (cs * i)

    def k11(self, x, y):
        if self.const is not None:
            return np.full(np.broadcast(x, y).shape, self.const[0])
        return self._kl(np.broadcast_to(y, np.broadcast(x, y).shape))

    def k22(self, x, y):
        if self.const is not None:
            return np.full(np.broadcast(x, y).shape, self.const[1])
        return self._kl(np.broadcast_to(y, np.broadcast(x, y).shape))

    def dk_dy(self, x, y):
        """y-derivative of (k11, k22); the expansion has k11 = k22."""
        shape = np.broadcast(x, y).shape
        if self.const is not None:
            return np.zeros((2,) + shape)
        d = self._kl_dy(np.broadcast_to(y, shape))
        return np.stack([d, d])

    def tensor(self, x, y):
        """(..., 2, 2) diagonal tensor values."""
        k11, k22 = self.k11(x, y), self.k22(x, y)
        K = np.zeros(np.shape(k11) + (2, 2))
        K[..., 0, 0] = k11
        K[..., 1, 1] = k22
        return K


def constant_sample(k11: float, k22: float | None = None, j: int = 0):
    k22 = k11 if k22 is None else k22
    if not (k11 > 0 and k22 > 0):
        raise ValueError(f"conductivity entries must be positive, got {k11}, {k22}")
    return ConductivitySample(j=j, const=(float(k11), float(k22)))


def sample_conductivity(params: RandomFieldParams, seed: int = 0, level: int = 0,
                        j: int = 0, stream: int = STREAM_SAMPLES,
                        Y: np.ndarray | None = None) -> ConductivitySample:
    """One expansion sample; ``Y`` overrides the random coefficients."""
    if Y is None:
        Y = rng_for(seed, level, j, stream).uniform(-SQRT3, SQRT3,
                                                    params.n_coefficients)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (params.n_coefficients,):
        raise ValueError(f"expected {params.n_coefficients} coefficients")
    s = ConductivitySample(j=j, Y=Y, params=params)
    if params.positivity_floor > 0 or params.worst_case_minimum() <= 0:
        ygrid = np.linspace(-1.0, 1.0, 401)
        kmin = s.k11(0.0, ygrid).min()
        if kmin <= params.positivity_floor:
            raise SamplingError(
                f"sample {j}: conductivity minimum {kmin:g} violates floor "
                f"{params.positivity_floor:g}")
    return s


def sample_uniform_constant(low: float, high: float, seed: int, j: int,
                            level: int = 0) -> ConductivitySample:
    """Isotropic constant sample k*I with k uniform on [low, high]."""
    k = rng_for(seed, level, j, STREAM_CONSTANT).uniform(low, high)
    return constant_sample(k, k, j=j)


# --------------------------------------------------------------------------


@dataclass
class EnsembleStats:
    """Pointwise ensemble means and fluctuation extrema.

    ``kbar`` has shape (2, n_points) (diagonal entries); ``eta`` (J, n_iface)
    and ``eta_bar`` (n_iface,) live on the interface evaluation points.
    """

    kbar: np.ndarray
    eta: np.ndarray
    eta_bar: np.ndarray
    rho_max_j: np.ndarray
    eta_max_j: np.ndarray
    k_min_j: np.ndarray
    k_max_j: np.ndarray
    kbar_min: float

    @property
    def J(self) -> int:
        return self.eta.shape[0]

    @property
    def rho_max(self) -> float:
        return float(self.rho_max_j.max())

    @property
    def eta_max(self) -> float:
        return float(self.eta_max_j.max())

    @property
    def k_min(self) -> float:
        return float(self.k_min_j.min())

    @property
    def k_max(self) -> float:
        return float(self.k_max_j.max())


def eta_values(sample: ConductivitySample, alpha: float, x, y):
    """alpha / sqrt(tau . K tau) with tau = (1, 0)."""
    return alpha / np.sqrt(sample.k11(x, y))


def ensemble_stats(samples, alpha: float, points, iface_points) -> EnsembleStats:
    """Means and extrema over ``points`` (porous side) and ``iface_points``."""
    if len(samples) == 0:
        raise ValueError("ensemble needs at least one sample")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x, y = np.asarray(points, dtype=float).T
    xi, yi = np.asarray(iface_points, dtype=float).T
    K = np.stack([np.stack([s.k11(x, y), s.k22(x, y)]) for s in samples])  # (J,2,n)
    kbar = K.mean(axis=0)
    eta = np.stack([eta_values(s, alpha, xi, yi) for s in samples])
    eta_bar = eta.mean(axis=0)
    dev = np.abs(K - kbar)
    return EnsembleStats(
        kbar=kbar, eta=eta, eta_bar=eta_bar,
        rho_max_j=dev.max(axis=(1, 2)),
        eta_max_j=np.abs(eta - eta_bar).max(axis=1),
        k_min_j=K.min(axis=(1, 2)), k_max_j=K.max(axis=(1, 2)),
        kbar_min=float(kbar.min()))


@dataclass(frozen=True)
class AssumptionReport:
    eta_holds: bool
    eta_margin: float
    k_holds: bool
    k_margin: float

    @property
    def holds(self) -> bool:
        return self.eta_holds and self.k_holds


def assumption_check(stats: EnsembleStats) -> AssumptionReport:
    """eta_bar > eta'_max and kbar_min > rho'_max (with margins)."""
    eta_margin = float(stats.eta_bar.min() - stats.eta_max)
    k_margin = stats.kbar_min - stats.rho_max
    report = AssumptionReport(eta_margin > 0, eta_margin, k_margin > 0, k_margin)
    if not report.holds:
        log.warning("ensemble fluctuation assumptions violated: %s", report)
    return report
