"""Structured triangulations of axis-aligned rectangles.

Meshes are produced by splitting each rectangular cell along its SW-NE
diagonal.  Uniform red refinement of such a mesh is again a SW-NE
structured mesh with doubled cell counts, so the hierarchy is nested.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EXTERIOR = "exterior_dirichlet"
INTERFACE = "interface"
TAGS = (EXTERIOR, INTERFACE)


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulation with tagged boundary edges.

    Attributes
    ----------
    vertices : (N, 2) float array
    triangles : (T, 3) int array, counterclockwise
    boundary_edges : (B, 2) int array
    boundary_tags : (B,) array of tag strings, one of ``TAGS``
    h : float
        Maximum edge length.
    level : int
        Number of refinements applied to the base mesh.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray
    h: float
    level: int = 0
    shape: tuple | None = None  # (nx, ny) cell counts for structured meshes

    def __post_init__(self):
        for arr in (self.vertices, self.triangles, self.boundary_edges,
                    self.boundary_tags):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def areas(self) -> np.ndarray:
        """Signed triangle areas."""
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs."""
        return _unique_edges(self.triangles)[0]

    def tagged_edges(self, tag: str) -> np.ndarray:
        return self.boundary_edges[self.boundary_tags == tag]

    def tagged_nodes(self, tag: str) -> np.ndarray:
        return np.unique(self.tagged_edges(tag))

    def dump(self, path) -> None:
        """Write the debug text format (``v x y``, ``t i j k``, ``b i j tag``)."""
        lines = [f"v {x:.17g} {y:.17g}" for x, y in self.vertices]
        lines += [f"t {i} {j} {k}" for i, j, k in self.triangles]
        lines += [f"b {i} {j} {t}"
                  for (i, j), t in zip(self.boundary_edges, self.boundary_tags)]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True, eq=False)
class InterfaceMap:
    """Matched node lists on the two sides of the interface ``y = 0``.

    ``fluid_nodes[i]`` and ``porous_nodes[i]`` sit at the same point ``x[i]``;
    ``edges`` holds index pairs into these lists.
    """

    fluid_nodes: np.ndarray
    porous_nodes: np.ndarray
    x: np.ndarray
    edges: np.ndarray
    n_f: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0]))
    n_p: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    tau: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))

    @property
    def n_nodes(self) -> int:
        return len(self.x)

    @property
    def length(self) -> float:
        return float(self.x[-1] - self.x[0])


def _unique_edges(triangles):
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = np.sort(triangles[:, local].reshape(-1, 2), axis=1)
    edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def _max_edge_length(vertices, triangles):
    edges = _unique_edges(triangles)[0]
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    return float(np.sqrt((d ** 2).sum(axis=1)).max())


def build_rect_mesh(x_range, y_range, nx: int, ny: int,
                    interface_y: float | None = None) -> TriMesh:
    """Structured mesh of a rectangle with ``nx * ny`` cells.

    Boundary edges lying on ``y = interface_y`` are tagged as interface,
    all others as exterior Dirichlet.
    """
    x0, x1 = map(float, x_range)
    y0, y1 = map(float, y_range)
    if nx < 1 or ny < 1 or int(nx) != nx or int(ny) != ny:
        raise MeshError(f"cell counts must be positive integers, got {nx}, {ny}")
    if not (x1 > x0 and y1 > y0):
        raise MeshError(f"degenerate rectangle {x_range} x {y_range}")
    nx, ny = int(nx), int(ny)

    xs = x0 + (x1 - x0) * np.arange(nx + 1) / nx
    ys = y0 + (y1 - y0) * np.arange(ny + 1) / ny
    xs[-1], ys[-1] = x1, y1
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    sw, se, ne, nw = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([sw, se, ne])
    triangles[1::2] = np.column_stack([sw, ne, nw])

    ii = np.arange(nx)
    jj = np.arange(ny)
    bottom = np.column_stack([vid(ii, 0), vid(ii + 1, 0)])
    right = np.column_stack([vid(nx, jj), vid(nx, jj + 1)])
    top = np.column_stack([vid(ii + 1, ny), vid(ii, ny)])
    left = np.column_stack([vid(0, jj + 1), vid(0, jj)])
    bedges = np.vstack([bottom, right, top, left])
    tags = np.full(len(bedges), EXTERIOR, dtype=object)
    if interface_y is not None:
        on_iface = np.all(vertices[bedges, 1] == interface_y, axis=1)
        tags[on_iface] = INTERFACE

    return TriMesh(vertices, triangles, bedges, tags,
                   h=_max_edge_length(vertices, triangles), level=0,
                   shape=(nx, ny))


def refine(mesh: TriMesh) -> TriMesh:
    """Red refinement: every triangle split into four via edge midpoints."""
    edges, tri_edges = _unique_edges(mesh.triangles)
    nv = mesh.n_vertices
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mids])

    a, b, c = mesh.triangles.T
    m_ab = nv + tri_edges[:, 0]
    m_bc = nv + tri_edges[:, 1]
    m_ca = nv + tri_edges[:, 2]
    triangles = np.empty((4 * mesh.n_triangles, 3), dtype=np.int64)
    triangles[0::4] = np.column_stack([a, m_ab, m_ca])
    triangles[1::4] = np.column_stack([m_ab, b, m_bc])
    triangles[2::4] = np.column_stack([m_ca, m_bc, c])
    triangles[3::4] = np.column_stack([m_ab, m_bc, m_ca])

    # midpoint of each boundary edge, looked up in the sorted edge table
    be = np.sort(mesh.boundary_edges, axis=1)
    keys = edges[:, 0] * nv + edges[:, 1]
    pos = np.searchsorted(keys, be[:, 0] * nv + be[:, 1])
    mid = nv + pos
    p, q = mesh.boundary_edges.T
    bedges = np.empty((2 * len(p), 2), dtype=np.int64)
    bedges[0::2] = np.column_stack([p, mid])
    bedges[1::2] = np.column_stack([mid, q])
    tags = np.repeat(mesh.boundary_tags, 2)

    shape = None if mesh.shape is None else (2 * mesh.shape[0], 2 * mesh.shape[1])
    return TriMesh(vertices, triangles, bedges, tags,
                   h=_max_edge_length(vertices, triangles),
                   level=mesh.level + 1, shape=shape)


FLUID_BOX = ((0.0, np.pi), (0.0, 1.0))
POROUS_BOX = ((0.0, np.pi), (-1.0, 0.0))


def cells_for(h_target: float) -> tuple[int, int]:
    """Cell counts ``(nx, ny)`` for one unit-height subdomain of width pi."""
    if not h_target > 0:
        raise MeshError(f"h_target must be positive, got {h_target}")
    ny = int(round(1.0 / h_target))
    nx = int(round(np.pi / h_target))
    return max(nx, 1), max(ny, 1)


def interface_map(fluid: TriMesh, porous: TriMesh) -> InterfaceMap:
    fn = fluid.tagged_nodes(INTERFACE)
    pn = porous.tagged_nodes(INTERFACE)
    fn = fn[np.argsort(fluid.vertices[fn, 0], kind="stable")]
    pn = pn[np.argsort(porous.vertices[pn, 0], kind="stable")]
    if len(fn) != len(pn) or np.any(fluid.vertices[fn] != porous.vertices[pn]):
        raise MeshError("fluid and porous meshes do not match on the interface")
    n = len(fn)
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return InterfaceMap(fn, pn, fluid.vertices[fn, 0].copy(), edges)


def build_coupled_meshes(h_target: float, nx: int | None = None):
    """Fluid mesh on [0,pi]x[0,1], porous mesh on [0,pi]x[-1,0].

    ``ny = 1/h_target`` and ``nx = round(pi/h_target)`` unless ``nx`` is
    given explicitly.
    """
    nx_default, ny = cells_for(h_target)
    nx = nx_default if nx is None else nx
    fluid = build_rect_mesh(*FLUID_BOX, nx, ny, interface_y=0.0)
    porous = build_rect_mesh(*POROUS_BOX, nx, ny, interface_y=0.0)
    return fluid, porous, interface_map(fluid, porous)


def refine_coupled(fluid: TriMesh, porous: TriMesh):
    rf, rp = refine(fluid), refine(porous)
    return rf, rp, interface_map(rf, rp)


def coupled_hierarchy(h0: float, levels: int):
    """Nested coupled meshes for ``h0, h0/2, ..., h0/2**levels``."""
    fluid, porous, imap = build_coupled_meshes(h0)
    out = [(fluid, porous, imap)]
    for _ in range(levels):
        fluid, porous, imap = refine_coupled(fluid, porous)
        out.append((fluid, porous, imap))
    return out
