"""Finite element spaces, quadrature-point evaluation operators and assembly.

Every bilinear form is assembled as ``E1.T @ diag(w * c) @ E2`` where ``E1``
and ``E2`` evaluate basis functions (or derivatives) at quadrature points.
The same evaluation operators drive load vectors, error norms and the
batched ensemble corrections, so there is one source of truth for the
discretization.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .linalg import SparseSystem
from .mesh import EXTERIOR, InterfaceMap, TriMesh
from .quadrature import SEGMENT_3, TRIANGLE_7


class SpaceMismatch(ValueError):
    pass


class ElementGeometry:
    """Per-triangle affine data and physical quadrature points."""

    def __init__(self, mesh: TriMesh, rule=TRIANGLE_7):
        self.mesh = mesh
        self.rule = rule
        p = mesh.vertices[mesh.triangles]                # (T, 3, 2)
        self.area = mesh.areas()
        if np.any(self.area <= 0):
            raise ValueError("mesh has non-positive triangle areas")
        # grad lambda_a = rot90(p_{a+2} - p_{a+1}) / (2 area), inward normal
        e = np.roll(p, 1, axis=1) - np.roll(p, -1, axis=1)
        self.grad_lambda = np.stack([-e[..., 1], e[..., 0]], axis=-1) \
            / (2.0 * self.area[:, None, None])          # (T, 3, 2)
        self.n_q = len(rule.weights)
        self.points = np.einsum("qa,tad->tqd", rule.points, p).reshape(-1, 2)
        self.weights = (self.area[:, None] * rule.weights[None, :]).ravel()

    @property
    def n_triangles(self) -> int:
        return len(self.area)

    def element_integral(self, values: np.ndarray) -> np.ndarray:
        """Integrate quadrature-point values (..., T*Q) over each element."""
        v = np.asarray(values) * self.weights
        return v.reshape(*v.shape[:-1], self.n_triangles, self.n_q).sum(axis=-1)


_GEOMETRY_CACHE: dict[int, ElementGeometry] = {}


def geometry(mesh: TriMesh) -> ElementGeometry:
    key = id(mesh)
    geo = _GEOMETRY_CACHE.get(key)
    if geo is None or geo.mesh is not mesh:
        geo = ElementGeometry(mesh)
        _GEOMETRY_CACHE[key] = geo
    return geo


def _coo(rows, cols, vals, shape):
    return sp.csr_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))),
                         shape=shape)


class P1Space:
    """Continuous piecewise linears, optionally Dirichlet-constrained."""

    kind = "p1"

    def __init__(self, mesh: TriMesh, dirichlet_tag: str | None = EXTERIOR,
                 kind: str = "p1"):
        self.mesh = mesh
        self.kind = kind
        self.geo = geometry(mesh)
        self.ndof = mesh.n_vertices
        if dirichlet_tag is None:
            self.dirichlet = np.zeros(0, dtype=np.int64)
        else:
            self.dirichlet = mesh.tagged_nodes(dirichlet_tag)
        self.free = np.setdiff1d(np.arange(self.ndof), self.dirichlet)

    @cached_property
    def value_at_quad(self) -> sp.csr_matrix:
        geo, tri = self.geo, self.mesh.triangles
        rows = np.arange(geo.n_triangles * geo.n_q).reshape(-1, geo.n_q)
        rows = np.repeat(rows[:, :, None], 3, axis=2)
        cols = np.repeat(tri[:, None, :], geo.n_q, axis=1)
        vals = np.broadcast_to(geo.rule.points[None], rows.shape)
        return _coo(rows, cols, vals, (rows.size // 3, self.ndof))

    @cached_property
    def grad_at_element(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        """(Dx, Dy): constant element gradients, shape (T, ndof)."""
        geo, tri = self.geo, self.mesh.triangles
        rows = np.repeat(np.arange(geo.n_triangles)[:, None], 3, axis=1)
        shape = (geo.n_triangles, self.ndof)
        return (_coo(rows, tri, geo.grad_lambda[..., 0], shape),
                _coo(rows, tri, geo.grad_lambda[..., 1], shape))

    @cached_property
    def grad_at_quad(self):
        dx, dy = self.grad_at_element
        expand = sp.csr_matrix(
            (np.ones(self.geo.n_triangles * self.geo.n_q),
             (np.arange(self.geo.n_triangles * self.geo.n_q),
              np.repeat(np.arange(self.geo.n_triangles), self.geo.n_q))))
        return expand @ dx, expand @ dy

    @cached_property
    def mass(self) -> sp.csr_matrix:
        V = self.value_at_quad
        return (V.T @ sp.diags(self.geo.weights) @ V).tocsr()

    def stiffness(self, k11_elem, k22_elem=None) -> sp.csr_matrix:
        """sum_T grad(v)^T diag(int_T k11, int_T k22) grad(u)."""
        k22_elem = k11_elem if k22_elem is None else k22_elem
        dx, dy = self.grad_at_element
        return (dx.T @ sp.diags(k11_elem) @ dx
                + dy.T @ sp.diags(k22_elem) @ dy).tocsr()

    @cached_property
    def seminorm_matrix(self) -> sp.csr_matrix:
        return self.stiffness(self.geo.area)

    def interpolate(self, fn) -> np.ndarray:
        x, y = self.mesh.vertices.T
        return np.asarray(fn(x, y), dtype=float) * np.ones_like(x)

    def evaluate(self, coeffs):
        """Values and gradients of a field at the quadrature points."""
        dx, dy = self.grad_at_quad
        return self.value_at_quad @ coeffs, np.stack([dx @ coeffs, dy @ coeffs])


class VelocitySpace:
    """Vector MINI space: P1 plus the cubic bubble 27*l0*l1*l2 per triangle.

    Degrees of freedom are blocked by component: for component ``c`` the
    nodal unknowns occupy ``c*(N+T) + [0, N)`` and the bubble unknowns
    ``c*(N+T) + N + [0, T)``.
    """

    kind = "velocity"

    def __init__(self, mesh: TriMesh, dirichlet_tag: str = EXTERIOR):
        self.mesh = mesh
        self.geo = geometry(mesh)
        self.n_nodes = mesh.n_vertices
        self.n_bubbles = mesh.n_triangles
        self.block = self.n_nodes + self.n_bubbles
        self.ndof = 2 * self.block
        nodes = mesh.tagged_nodes(dirichlet_tag)
        self.dirichlet_nodes = nodes
        self.dirichlet = np.concatenate([nodes, self.block + nodes])
        self.free = np.setdiff1d(np.arange(self.ndof), self.dirichlet)

    def node_dofs(self, c: int, nodes) -> np.ndarray:
        return c * self.block + np.asarray(nodes)

    def bubble_dofs(self, c: int) -> np.ndarray:
        return c * self.block + self.n_nodes + np.arange(self.n_bubbles)

    @cached_property
    def _local(self):
        """Local values and gradients of [l0, l1, l2, bubble] at quad points."""
        geo = self.geo
        lam = geo.rule.points                              # (Q, 3)
        val = np.empty((geo.n_q, 4))
        val[:, :3] = lam
        val[:, 3] = 27.0 * lam.prod(axis=1)
        gl = geo.grad_lambda                               # (T, 3, 2)
        grad = np.empty((geo.n_triangles, geo.n_q, 4, 2))
        grad[:, :, :3, :] = gl[:, None, :, :]
        # d(l0 l1 l2) = l1 l2 dl0 + l0 l2 dl1 + l0 l1 dl2
        co = np.stack([lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2],
                       lam[:, 0] * lam[:, 1]], axis=1)     # (Q, 3)
        grad[:, :, 3, :] = 27.0 * np.einsum("qa,tad->tqd", co, gl)
        return val, grad

    def _local_cols(self, c: int):
        tri = self.mesh.triangles
        T = self.n_bubbles
        cols = np.empty((T, 4), dtype=np.int64)
        cols[:, :3] = c * self.block + tri
        cols[:, 3] = c * self.block + self.n_nodes + np.arange(T)
        return cols

    def _eval(self, c, local):
        geo = self.geo
        T, Q = geo.n_triangles, geo.n_q
        rows = np.repeat(np.arange(T * Q).reshape(T, Q)[:, :, None], 4, axis=2)
        cols = np.repeat(self._local_cols(c)[:, None, :], Q, axis=1)
        vals = np.broadcast_to(local, (T, Q, 4))
        return _coo(rows, cols, vals, (T * Q, self.ndof))

    @cached_property
    def value_at_quad(self):
        """Tuple of component evaluation operators ``(V0, V1)``."""
        val, _ = self._local
        return tuple(self._eval(c, val[None]) for c in (0, 1))

    @cached_property
    def grad_at_quad(self):
        """``G[c][d]`` evaluates d(u_c)/dx_d at quadrature points."""
        _, grad = self._local
        return tuple(tuple(self._eval(c, grad[..., d]) for d in (0, 1))
                     for c in (0, 1))

    @cached_property
    def mass(self) -> sp.csr_matrix:
        W = sp.diags(self.geo.weights)
        return sum((V.T @ W @ V) for V in self.value_at_quad).tocsr()

    @cached_property
    def seminorm_matrix(self) -> sp.csr_matrix:
        W = sp.diags(self.geo.weights)
        return sum(G.T @ W @ G for row in self.grad_at_quad
                   for G in row).tocsr()

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant (bubble coefficients zero)."""
        x, y = self.mesh.vertices.T
        u = np.zeros(self.ndof)
        vals = np.asarray(fn(x, y), dtype=float)
        u[:self.n_nodes] = vals[0] * np.ones_like(x)
        u[self.block:self.block + self.n_nodes] = vals[1] * np.ones_like(x)
        return u

    def p1_part(self, u: np.ndarray) -> np.ndarray:
        """Copy of ``u`` with bubble coefficients removed."""
        u = np.array(u, copy=True)
        for c in (0, 1):
            u[self.bubble_dofs(c)] = 0.0
        return u

    def evaluate(self, coeffs):
        vals = np.stack([V @ coeffs for V in self.value_at_quad])
        grads = np.stack([np.stack([G @ coeffs for G in row])
                          for row in self.grad_at_quad])
        return vals, grads


@dataclass
class FieldVector:
    """Coefficient vector tied to its space."""

    space: object
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[0] != self.space.ndof:
            raise SpaceMismatch(
                f"{self.space.kind} field has {self.values.shape[0]} entries, "
                f"space has {self.space.ndof}")

    @property
    def kind(self) -> str:
        return self.space.kind


class InterfaceSpace:
    """Traces on the interface: P1 on the interface edges.

    ``mass`` is the unconstrained P1 mass matrix on the interface nodes; the
    trace space proper (zero at both endpoints) is obtained with
    :meth:`project`.
    """

    def __init__(self, imap: InterfaceMap, fluid_mesh: TriMesh,
                 porous_mesh: TriMesh, rule=SEGMENT_3):
        self.imap = imap
        self.fluid_mesh = fluid_mesh
        self.porous_mesh = porous_mesh
        self.n = imap.n_nodes
        e = imap.edges
        x = imap.x
        length = x[e[:, 1]] - x[e[:, 0]]
        nE, Q = len(e), len(rule.weights)
        s = rule.points
        rows = np.repeat(np.arange(nE * Q).reshape(nE, Q)[:, :, None], 2, axis=2)
        cols = np.repeat(e[:, None, :], Q, axis=1)
        vals = np.broadcast_to(np.stack([1 - s, s], axis=1)[None], (nE, Q, 2))
        self.value_at_quad = _coo(rows, cols, vals, (nE * Q, self.n))
        self.weights = (length[:, None] * rule.weights[None, :]).ravel()
        xq = (x[e[:, 0], None] * (1 - s)[None] + x[e[:, 1], None] * s[None]).ravel()
        self.points = np.column_stack([xq, np.zeros_like(xq)])
        E = self.value_at_quad
        self.mass = (E.T @ sp.diags(self.weights) @ E).tocsr()
        self.interior = np.ones(self.n)
        self.interior[[0, -1]] = 0.0

    def weighted_mass(self, weight_q) -> sp.csr_matrix:
        E = self.value_at_quad
        return (E.T @ sp.diags(self.weights * weight_q) @ E).tocsr()

    def project(self, values):
        """Zero the two endpoint values (restriction to Z_h)."""
        return values * (self.interior if np.ndim(values) == 1
                         else self.interior[:, None])

    def norm(self, values) -> np.ndarray:
        """L2(Gamma) norm(s); columns of a 2-D array are separate traces."""
        mv = self.mass @ values
        return np.sqrt(np.maximum((values * mv).sum(axis=0), 0.0))

    def selector(self, nodes, ncols, sign=1.0) -> sp.csr_matrix:
        return sp.csr_matrix((np.full(self.n, sign), (np.arange(self.n), nodes)),
                             shape=(self.n, ncols))


@dataclass
class Spaces:
    """All spaces of the coupled problem on one mesh level."""

    fluid_mesh: TriMesh
    porous_mesh: TriMesh
    imap: InterfaceMap
    velocity: VelocitySpace
    pressure: P1Space
    head: P1Space
    trace: InterfaceSpace

    @property
    def h(self) -> float:
        return max(self.fluid_mesh.h, self.porous_mesh.h)

    @property
    def h_nominal(self) -> float:
        """1/ny for structured meshes (the mesh size quoted in experiments)."""
        shape = self.porous_mesh.shape
        return 1.0 / shape[1] if shape else self.h

    @cached_property
    def select_u1(self):
        return self.trace.selector(
            self.velocity.node_dofs(0, self.imap.fluid_nodes), self.velocity.ndof)

    @cached_property
    def select_un(self):
        """u . n_f = -u_2 at interface nodes (unprojected)."""
        return self.trace.selector(
            self.velocity.node_dofs(1, self.imap.fluid_nodes), self.velocity.ndof,
            sign=-1.0)

    @cached_property
    def select_phi(self):
        return self.trace.selector(self.imap.porous_nodes, self.head.ndof)

    @cached_property
    def couple_stokes(self) -> sp.csr_matrix:
        """<delta, v.n_f> for delta given by interface nodal values."""
        return (self.select_un.T @ self.trace.mass).tocsr()

    @cached_property
    def couple_darcy(self) -> sp.csr_matrix:
        """<delta, psi>."""
        return (self.select_phi.T @ self.trace.mass).tocsr()


def build_spaces(fluid_mesh, porous_mesh, imap) -> Spaces:
    return Spaces(fluid_mesh, porous_mesh, imap,
                  VelocitySpace(fluid_mesh), P1Space(fluid_mesh, None, "pressure"),
                  P1Space(porous_mesh, EXTERIOR, "head"),
                  InterfaceSpace(imap, fluid_mesh, porous_mesh))


# --------------------------------------------------------------------------
# Operators


def strain_matrix(vel: VelocitySpace, nu: float = 1.0) -> sp.csr_matrix:
    """2 nu (D(u), D(v))."""
    G = vel.grad_at_quad
    W = sp.diags(vel.geo.weights)
    e11, e22 = G[0][0], G[1][1]
    e12 = G[0][1] + G[1][0]
    return (nu * (2.0 * (e11.T @ W @ e11) + 2.0 * (e22.T @ W @ e22)
                  + e12.T @ W @ e12)).tocsr()


def divergence_matrix(vel: VelocitySpace, pres: P1Space) -> sp.csr_matrix:
    """b_f(v, q) = -(div v, q) with rows q, columns v."""
    G = vel.grad_at_quad
    W = sp.diags(vel.geo.weights)
    return (-(pres.value_at_quad.T @ W @ (G[0][0] + G[1][1]))).tocsr()


def interface_robin_matrix(spaces: Spaces, gamma_f: float, eta_q) -> sp.csr_matrix:
    """gamma_f <u.n_f, v.n_f> + <eta u.tau, v.tau> on the velocity dofs."""
    tr = spaces.trace
    Sn, St = spaces.select_un, spaces.select_u1
    return (gamma_f * (Sn.T @ tr.mass @ Sn)
            + St.T @ tr.weighted_mass(eta_q) @ St).tocsr()


def tangential_matrix(spaces: Spaces, eta_q) -> sp.csr_matrix:
    """<eta u.tau, v.tau> on the velocity dofs."""
    St = spaces.select_u1
    return (St.T @ spaces.trace.weighted_mass(eta_q) @ St).tocsr()


def _check_positive(**kw):
    for name, v in kw.items():
        if not np.all(np.asarray(v) > 0):
            raise ValueError(f"{name} must be positive")


def assemble_stokes_operator(spaces: Spaces, nu: float, gamma_f: float,
                             eta_q) -> SparseSystem:
    """Saddle matrix of the Robin Stokes subproblem.

    Unknown ordering ``[u (velocity dofs), p (pressure dofs)]``; the
    Dirichlet velocity dofs are eliminated by :class:`SparseSystem`.
    """
    _check_positive(nu=nu, gamma_f=gamma_f, eta=eta_q)
    vel, pres = spaces.velocity, spaces.pressure
    A = strain_matrix(vel, nu) + interface_robin_matrix(spaces, gamma_f, eta_q)
    B = divergence_matrix(vel, pres)
    K = sp.bmat([[A, B.T], [B, None]], format="csr")
    return SparseSystem(K, dirichlet=vel.dirichlet, symmetric=True)


def assemble_darcy_operator(spaces: Spaces, gamma_p: float, k11_elem, k22_elem,
                            g: float) -> SparseSystem:
    """gamma_p (K grad phi, grad psi) + g <phi, psi>.

    ``k11_elem``/``k22_elem`` are element integrals of the diagonal
    conductivity entries.
    """
    _check_positive(gamma_p=gamma_p)
    if np.any(np.asarray(k11_elem) <= 0) or np.any(np.asarray(k22_elem) <= 0):
        raise ValueError("conductivity tensor must be positive definite")
    head = spaces.head
    S = head.stiffness(k11_elem, k22_elem)
    Sp = spaces.select_phi
    K = gamma_p * S + g * (Sp.T @ spaces.trace.mass @ Sp)
    return SparseSystem(K.tocsr(), dirichlet=head.dirichlet, symmetric=True)


def load_vector(space, f_q) -> np.ndarray:
    """(f, v) for quadrature-point values ``f_q``; vector spaces take (2, nq)."""
    W = space.geo.weights
    if isinstance(space, VelocitySpace):
        f_q = np.asarray(f_q)
        return sum(V.T @ (W * f_q[c]) for c, V in enumerate(space.value_at_quad))
    return space.value_at_quad.T @ (W * f_q)


def assemble_stokes_rhs(spaces: Spaces, f_q, delta_f, u_prev, eta_q, eta_bar_q):
    """(f, v) - <(eta - eta_bar) u_prev.tau, v.tau> + <delta_f, v.n_f>.

    Returned on the full velocity-pressure vector (pressure rows zero).
    """
    vel = spaces.velocity
    u_prev = np.asarray(u_prev, dtype=float)
    delta_f = np.asarray(delta_f, dtype=float)
    if u_prev.shape[0] != vel.ndof:
        raise SpaceMismatch("u_prev is not a velocity field")
    if delta_f.shape[0] != spaces.trace.n:
        raise SpaceMismatch("delta_f is not an interface trace")
    rhs = np.zeros(vel.ndof + spaces.pressure.ndof)
    rhs[:vel.ndof] = (load_vector(vel, f_q)
                      - tangential_matrix(spaces, np.asarray(eta_q) - eta_bar_q) @ u_prev
                      + spaces.couple_stokes @ delta_f)
    return rhs


def assemble_darcy_rhs(spaces: Spaces, gamma_p, delta_p, phi_prev,
                       dk11_elem, dk22_elem, fp_q=None):
    """<delta_p, psi> - gamma_p ((K_j - K_bar) grad phi_prev, grad psi)
    + gamma_p (f_p, psi)."""
    head = spaces.head
    phi_prev = np.asarray(phi_prev, dtype=float)
    delta_p = np.asarray(delta_p, dtype=float)
    if phi_prev.shape[0] != head.ndof:
        raise SpaceMismatch("phi_prev is not a head field")
    if delta_p.shape[0] != spaces.trace.n:
        raise SpaceMismatch("delta_p is not an interface trace")
    rhs = spaces.couple_darcy @ delta_p \
        - gamma_p * (head.stiffness(dk11_elem, dk22_elem) @ phi_prev)
    if fp_q is not None:
        rhs = rhs + gamma_p * load_vector(head, fp_q)
    return rhs


def normal_trace(spaces: Spaces, u) -> np.ndarray:
    """Nodal u.n_f on the interface, endpoints zeroed."""
    return spaces.trace.project(spaces.select_un @ u)


def head_trace(spaces: Spaces, phi) -> np.ndarray:
    return spaces.trace.project(spaces.select_phi @ phi)


# --------------------------------------------------------------------------
# Error norms


@dataclass(frozen=True)
class ErrorNorms:
    L2_abs: float
    H1_abs: float
    L2_rel: float | None
    H1_rel: float | None

    def rel_or_abs(self):
        """Relative errors, falling back to absolute where the exact norm is 0."""
        return (self.L2_abs if self.L2_rel is None else self.L2_rel,
                self.H1_abs if self.H1_rel is None else self.H1_rel)


def compute_error(space, coeffs, exact, grad_exact=None) -> ErrorNorms:
    """Errors of an FE field against an exact field, by element quadrature.

    ``exact(x, y)`` returns values (shape ``(2, n)`` for velocity);
    ``grad_exact(x, y)`` returns gradients (``(2, n)`` scalar, ``(2, 2, n)``
    vector, indexed ``[component, derivative]``).  The H1 norm is the full
    norm (L2 plus gradient seminorm).
    """
    if isinstance(coeffs, FieldVector):
        coeffs = coeffs.values
    x, y = space.geo.points.T
    w = space.geo.weights
    val, grad = space.evaluate(coeffs)
    ex = np.asarray(exact(x, y), dtype=float) * np.ones_like(val)
    gx = (np.zeros_like(grad) if grad_exact is None
          else np.asarray(grad_exact(x, y), dtype=float) * np.ones_like(grad))
    sum_axes = tuple(range(val.ndim - 1))
    gaxes = tuple(range(grad.ndim - 1))

    def integ(a, axes):
        return float((np.sum(a, axis=axes) * w).sum()) if axes else float((a * w).sum())

    e0 = integ((val - ex) ** 2, sum_axes)
    e1 = integ((grad - gx) ** 2, gaxes)
    n0 = integ(ex ** 2, sum_axes)
    n1 = integ(gx ** 2, gaxes)
    L2, H1 = np.sqrt(e0), np.sqrt(e0 + e1)
    rel0 = L2 / np.sqrt(n0) if n0 > 0 else None
    rel1 = H1 / np.sqrt(n0 + n1) if n0 + n1 > 0 else None
    return ErrorNorms(L2, H1, rel0, rel1)


def fe_norms(space, coeffs):
    """(L2, H1) norms of an FE field via its mass and seminorm matrices.

    ``coeffs`` may hold several fields as columns.
    """
    m = (coeffs * (space.mass @ coeffs)).sum(axis=0)
    s = (coeffs * (space.seminorm_matrix @ coeffs)).sum(axis=0)
    return np.sqrt(np.maximum(m, 0)), np.sqrt(np.maximum(m + s, 0))


def adjacent_triangles(mesh: TriMesh, a, b) -> np.ndarray:
    """Index of the (unique) triangle containing each boundary edge (a, b)."""
    tri = mesh.triangles
    nv = mesh.n_vertices
    local = np.array([[0, 1], [1, 2], [2, 0]])
    e = np.sort(tri[:, local], axis=2)
    keys = (e[..., 0] * nv + e[..., 1]).ravel()
    owner = np.repeat(np.arange(len(tri)), 3)
    order = np.argsort(keys, kind="stable")
    query = np.minimum(a, b) * nv + np.maximum(a, b)
    pos = np.searchsorted(keys[order], query)
    return owner[order][pos]


def interface_flux_mismatch(spaces: Spaces, u, phi, k22_fn) -> np.ndarray:
    """|u.n_f - K grad(phi).n_p| at interface quadrature points.

    ``grad(phi)`` is taken from the porous element adjacent to each edge;
    ``k22_fn(x, y)`` is the normal-normal conductivity entry.
    """
    tr = spaces.trace
    un_q = tr.value_at_quad @ (spaces.select_un @ u)
    pm = spaces.porous_mesh
    imap = spaces.imap
    # porous triangle adjacent to each interface edge
    a = imap.porous_nodes[imap.edges[:, 0]]
    b = imap.porous_nodes[imap.edges[:, 1]]
    adj = adjacent_triangles(pm, a, b)
    _, dy = spaces.head.grad_at_element
    dphi_dy = (dy @ phi)[adj]
    nq = len(tr.weights) // len(adj)
    x, y = tr.points.T
    k = np.asarray(k22_fn(x, y), dtype=float) * np.ones_like(x)
    flux = k * np.repeat(dphi_dy, nq)      # K grad(phi) . n_p, n_p = (0, 1)
    return np.abs(un_q - flux)
