"""Reference problems and independent checks.

* Closed-form test fields with hand-derived forcing terms.
* A finite-difference residual check of the strong form and the interface
  conditions, used as a gate before any case is trusted.
* A monolithic solve of the fully coupled discrete system; its solution is
  the fixed point the domain decomposition iteration must reach.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import fem
from .linalg import SparseSystem, factorize
from .randfield import ConductivitySample, constant_sample

PI = np.pi


@dataclass
class ManufacturedCase:
    """Fields, forcing and boundary data of one deterministic sample.

    Vector callables return arrays of shape ``(2, n)``; gradients are
    indexed ``[component, derivative]``.  ``exact`` tells whether
    ``(u, p, phi)`` actually solve the coupled problem with this forcing.
    """

    name: str
    sample: ConductivitySample
    u: Callable
    grad_u: Callable
    p: Callable
    grad_p: Callable
    phi: Callable
    grad_phi: Callable
    f: Callable
    fp: Callable | None = None
    nu: float = 1.0
    g: float = 1.0
    alpha: float = 1.0
    exact: bool = True
    u_bc: Callable | None = None
    phi_bc: Callable | None = None

    def __post_init__(self):
        if self.u_bc is None:
            self.u_bc = self.u
        if self.phi_bc is None:
            self.phi_bc = self.phi

    def with_forcing(self, f=None, fp=None, name=None) -> "ManufacturedCase":
        from dataclasses import replace
        return replace(self, f=f or self.f, fp=fp if fp is not None else self.fp,
                       name=name or self.name, exact=False)


def _phi(x, y):
    return (np.exp(y) - np.exp(-y)) * np.sin(x)


def _grad_phi(x, y):
    return np.stack([(np.exp(y) - np.exp(-y)) * np.cos(x),
                     (np.exp(y) + np.exp(-y)) * np.sin(x)])


def _velocity(k11, k22):
    """The closed-form velocity and its gradient for coefficient fields.

    ``k11``/``k22`` are callables of (x, y); their y-derivatives enter the
    gradient through ``dk``.
    """

    def u(x, y):
        a, b = k11(x, y), k22(x, y)
        return np.stack([a / PI * np.sin(2 * PI * y) * np.cos(x),
                         (-2 * b + b / PI ** 2 * np.sin(PI * y) ** 2) * np.sin(x)])

    return u


def test1_case(k11: float, k22: float | None = None, nu: float = 1.0,
               g: float = 1.0, alpha: float = 1.0) -> ManufacturedCase:
    """Smooth problem with constant diagonal conductivity.

    For ``k11 == k22`` the fields solve the coupled problem exactly
    (zero Darcy source, p = 0).  For ``k11 != k22`` the same fields are
    used as data with the matching forcing; the velocity is then not
    solenoidal and the tangential interface condition fails, so the case
    is flagged inexact.
    """
    k22 = k11 if k22 is None else k22
    a, b = float(k11), float(k22)
    sample = constant_sample(a, b)

    def u(x, y):
        return np.stack([a / PI * np.sin(2 * PI * y) * np.cos(x),
                         (-2 * b + b / PI ** 2 * np.sin(PI * y) ** 2) * np.sin(x)])

    def grad_u(x, y):
        s2, c2 = np.sin(2 * PI * y), np.cos(2 * PI * y)
        w = -2 * b + b / PI ** 2 * np.sin(PI * y) ** 2
        return np.stack([
            np.stack([-a / PI * s2 * np.sin(x), 2 * a * c2 * np.cos(x)]),
            np.stack([w * np.cos(x), b / PI * s2 * np.sin(x)]),
        ])

    def f(x, y):
        # -div(2 nu D(u)) = -nu (lap u + grad div u), div u = (b-a)/pi s2 sin x
        s2, c2 = np.sin(2 * PI * y), np.cos(2 * PI * y)
        u1, u2 = u(x, y)
        f1 = nu * ((1 + 4 * PI ** 2) * u1 - (b - a) / PI * s2 * np.cos(x))
        f2 = nu * (u2 - 2 * b * c2 * np.sin(x) - 2 * (b - a) * c2 * np.sin(x))
        return np.stack([f1, f2])

    def fp(x, y):
        return (a - b) * _phi(x, y)

    zero = lambda x, y: np.zeros(np.broadcast(x, y).shape)
    zero2 = lambda x, y: np.zeros((2,) + np.broadcast(x, y).shape)
    return ManufacturedCase(
        name=f"test1({a:g},{b:g})", sample=sample, u=u, grad_u=grad_u,
        p=zero, grad_p=zero2, phi=_phi, grad_phi=_grad_phi, f=f,
        fp=None if a == b else fp, nu=nu, g=g, alpha=alpha, exact=(a == b))


def test2_case(sample: ConductivitySample, nu: float = 1.0, g: float = 1.0,
               alpha: float = 1.0) -> ManufacturedCase:
    """Random-conductivity problem: forcing and Dirichlet data as given
    formulas in k11(x, w), k22(x, w).  Not an exact solution."""
    k11, k22 = sample.k11, sample.k22
    u = _velocity(k11, k22)

    def grad_u(x, y):
        # includes the y-derivative of the coefficient fields
        a, b = k11(x, y), k22(x, y)
        da, db = sample.dk_dy(x, y)
        s2, c2 = np.sin(2 * PI * y), np.cos(2 * PI * y)
        sq = np.sin(PI * y) ** 2
        w = -2 * b + b / PI ** 2 * sq
        dw = -2 * db + db / PI ** 2 * sq + b / PI * s2
        return np.stack([
            np.stack([-a / PI * s2 * np.sin(x),
                      (da / PI * s2 + 2 * a * c2) * np.cos(x)]),
            np.stack([w * np.cos(x), dw * np.sin(x)]),
        ])

    def f(x, y):
        a, b = k11(x, y), k22(x, y)
        f1 = (1 + nu + 4 * nu * PI ** 2) * a / PI * np.sin(2 * PI * y) * np.cos(x)
        f2 = (-2 * nu * b * np.cos(2 * PI * y) * np.sin(x)
              + (1 + nu) * (-2 * b + b / PI ** 2 * np.sin(PI * y) ** 2) * np.sin(x))
        return np.stack([f1, f2])

    zero = lambda x, y: np.zeros(np.broadcast(x, y).shape)
    zero2 = lambda x, y: np.zeros((2,) + np.broadcast(x, y).shape)
    return ManufacturedCase(
        name=f"test2[{sample.j}]", sample=sample, u=u, grad_u=grad_u,
        p=zero, grad_p=zero2, phi=_phi, grad_phi=_grad_phi, f=f, fp=_phi,
        nu=nu, g=g, alpha=alpha, exact=False)


# --------------------------------------------------------------------------
# finite-difference residual oracle


def _fd_grad(fn, x, y, h):
    """Central differences of fn (any leading shape) in x and y."""
    dx = (fn(x + h, y) - fn(x - h, y)) / (2 * h)
    dy = (fn(x, y + h) - fn(x, y - h)) / (2 * h)
    return np.stack([dx, dy], axis=-2 if np.ndim(dx) > np.ndim(x) else 0)


def strong_residual_check(case: ManufacturedCase, n_points: int = 100,
                          fd_step: float = 1e-5, seed: int = 0) -> dict:
    """Max absolute residuals of the strong form at random points.

    Gradients supplied by the case are first checked against central
    differences of the fields; second derivatives are then central
    differences of those gradients.  Interface residuals are evaluated on
    y = 0.
    """
    rng = np.random.default_rng(seed)
    h = fd_step
    xf = rng.uniform(0.1, PI - 0.1, n_points)
    yf = rng.uniform(0.1, 0.9, n_points)
    xp, yp = xf, -yf
    nu, g, alpha = case.nu, case.g, case.alpha
    k11, k22 = case.sample.k11, case.sample.k22
    out = {}

    # consistency of supplied gradients
    du = np.stack([(case.u(xf + h, yf) - case.u(xf - h, yf)) / (2 * h),
                   (case.u(xf, yf + h) - case.u(xf, yf - h)) / (2 * h)], axis=1)
    out["grad_u"] = float(np.abs(du - case.grad_u(xf, yf)).max())
    dphi = np.stack([(case.phi(xp + h, yp) - case.phi(xp - h, yp)) / (2 * h),
                     (case.phi(xp, yp + h) - case.phi(xp, yp - h)) / (2 * h)])
    out["grad_phi"] = float(np.abs(dphi - case.grad_phi(xp, yp)).max())

    def stress(x, y):
        G = case.grad_u(x, y)
        T = nu * (G + np.swapaxes(G, 0, 1))
        T[0, 0] -= case.p(x, y)
        T[1, 1] -= case.p(x, y)
        return T

    # -div T - f, with (div T)_i = d_j T_ij
    dT_dx = (stress(xf + h, yf) - stress(xf - h, yf)) / (2 * h)
    dT_dy = (stress(xf, yf + h) - stress(xf, yf - h)) / (2 * h)
    divT = dT_dx[:, 0] + dT_dy[:, 1]
    out["momentum"] = float(np.abs(-divT - case.f(xf, yf)).max())
    G = case.grad_u(xf, yf)
    out["continuity"] = float(np.abs(G[0, 0] + G[1, 1]).max())

    def flux(x, y):
        gp = case.grad_phi(x, y)
        return np.stack([k11(x, y) * gp[0], k22(x, y) * gp[1]])

    divq = ((flux(xp + h, yp) - flux(xp - h, yp))[0]
            + (flux(xp, yp + h) - flux(xp, yp - h))[1]) / (2 * h)
    src = case.fp(xp, yp) if case.fp is not None else 0.0
    out["darcy"] = float(np.abs(-divq - src).max())

    # interface conditions on y = 0 with n_f = (0, -1), tau = (1, 0)
    xi = rng.uniform(0.0, PI, n_points)
    yi = np.zeros_like(xi)
    u = case.u(xi, yi)
    T = stress(xi, yi)
    un = -u[1]
    out["mass"] = float(np.abs(un - flux(xi, yi)[1]).max())
    out["normal_stress"] = float(np.abs(-T[1, 1] - g * case.phi(xi, yi)).max())
    eta = alpha / np.sqrt(k11(xi, yi))
    out["bjs"] = float(np.abs(T[0, 1] - eta * u[0]).max())  # -tau.T.n_f = T_12
    return out


# --------------------------------------------------------------------------
# monolithic coupled solve


@dataclass
class SolutionFields:
    """Discrete fields for one or several samples (columns)."""

    spaces: fem.Spaces
    u: np.ndarray
    p: np.ndarray
    phi: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def J(self) -> int:
        return 1 if self.u.ndim == 1 else self.u.shape[1]

    def sample(self, j: int) -> "SolutionFields":
        if self.u.ndim == 1:
            return self
        return SolutionFields(self.spaces, self.u[:, j], self.p[:, j], self.phi[:, j])


def sample_loads(spaces: fem.Spaces, case: ManufacturedCase):
    """Body force and source load vectors plus Dirichlet values."""
    vel, head = spaces.velocity, spaces.head
    xf, yf = vel.geo.points.T
    Fu = fem.load_vector(vel, case.f(xf, yf))
    xp, yp = head.geo.points.T
    Fp = (fem.load_vector(head, case.fp(xp, yp)) if case.fp is not None
          else np.zeros(head.ndof))
    nodes = vel.dirichlet_nodes
    x, y = spaces.fluid_mesh.vertices[nodes].T
    ub = np.asarray(case.u_bc(x, y), dtype=float)
    uD = np.concatenate([ub[0], ub[1]])
    x, y = spaces.porous_mesh.vertices[head.dirichlet].T
    phiD = np.asarray(case.phi_bc(x, y), dtype=float) * np.ones_like(x)
    return Fu, Fp, uD, phiD


def element_conductivity(spaces: fem.Spaces, sample: ConductivitySample):
    """Element integrals of (k11, k22) on the porous mesh."""
    geo = spaces.head.geo
    x, y = geo.points.T
    return geo.element_integral(sample.k11(x, y)), geo.element_integral(sample.k22(x, y))


def monolithic_coupled_solve(spaces: fem.Spaces, case: ManufacturedCase,
                             gamma_f: float = 1.0, gamma_p: float = 1.0) -> SolutionFields:
    """One linear solve of the coupled discrete problem.

    The interface coupling is written through the Robin data that the
    decomposition iteration exchanges at its fixed point,
    ``delta_f = gamma_f u.n_f - g phi`` and ``delta_p = gamma_p u.n_f + g phi``
    (both restricted to the trace space), so the solution coincides with
    the converged iteration for any admissible Robin parameters.
    """
    vel, pres, head, tr = spaces.velocity, spaces.pressure, spaces.head, spaces.trace
    nu, g = case.nu, case.g
    xi, yi = tr.points.T
    eta = case.alpha / np.sqrt(case.sample.k11(xi, yi))
    k11e, k22e = element_conductivity(spaces, case.sample)

    Z = sp.diags(tr.interior)
    Sun, Sphi = spaces.select_un, spaces.select_phi
    Auu = (fem.strain_matrix(vel, nu)
           + fem.interface_robin_matrix(spaces, gamma_f, eta)
           - gamma_f * spaces.couple_stokes @ Z @ Sun)
    Auphi = g * spaces.couple_stokes @ Z @ Sphi
    B = fem.divergence_matrix(vel, pres)
    Aphiu = -gamma_p * spaces.couple_darcy @ Z @ Sun
    Aphiphi = (gamma_p * head.stiffness(k11e, k22e)
               + g * (Sphi.T @ tr.mass @ Sphi)
               - g * spaces.couple_darcy @ Z @ Sphi)
    M = sp.bmat([[Auu, B.T, Auphi],
                 [B, None, None],
                 [Aphiu, None, Aphiphi]], format="csr")

    nu_, np_ = vel.ndof, pres.ndof
    dirichlet = np.concatenate([vel.dirichlet, nu_ + np_ + head.dirichlet])
    system = SparseSystem(M, dirichlet=dirichlet)
    Fu, Fp, uD, phiD = sample_loads(spaces, case)
    rhs = np.concatenate([Fu, np.zeros(np_), gamma_p * Fp])
    values = np.concatenate([uD, phiD])
    x = factorize(system).solve(rhs[system.free] - system.lift(values))
    full = system.expand(x, values)
    return SolutionFields(spaces, full[:nu_], full[nu_:nu_ + np_], full[nu_ + np_:])
