import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ensemble_ddm import mesh, uq
from ensemble_ddm.mesh import EXTERIOR, INTERFACE, MeshError


@settings(max_examples=30, deadline=None)
@given(nx=st.integers(1, 20), ny=st.integers(1, 20))
def test_rect_mesh_areas_positive_and_sum_to_domain(nx, ny):
    m = mesh.build_rect_mesh((0, np.pi), (0, 1), nx, ny, interface_y=0.0)
    a = m.areas()
    assert np.all(a > 0)
    assert a.sum() == pytest.approx(np.pi, rel=1e-12)
    assert m.n_triangles == 2 * nx * ny
    assert m.n_vertices == (nx + 1) * (ny + 1)


@settings(max_examples=20, deadline=None)
@given(nx=st.integers(1, 12), ny=st.integers(1, 12))
def test_boundary_is_closed_and_tagged(nx, ny):
    m = mesh.build_rect_mesh((0, np.pi), (-1, 0), nx, ny, interface_y=0.0)
    # each boundary vertex touches exactly two boundary edges
    counts = np.bincount(m.boundary_edges.ravel(), minlength=m.n_vertices)
    assert set(np.unique(counts[counts > 0])) == {2}
    assert len(m.tagged_edges(INTERFACE)) == nx
    assert len(m.tagged_edges(EXTERIOR)) == nx + 2 * ny
    assert np.allclose(m.vertices[m.tagged_nodes(INTERFACE), 1], 0.0)


def test_every_interior_edge_is_shared_by_two_triangles():
    m = mesh.build_rect_mesh((0, 1), (0, 1), 5, 3)
    local = np.array([[0, 1], [1, 2], [2, 0]])
    e = np.sort(m.triangles[:, local].reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert counts.max() == 2
    assert (counts == 1).sum() == len(m.boundary_edges)


@settings(max_examples=10, deadline=None)
@given(nx=st.integers(1, 8), ny=st.integers(1, 8))
def test_refinement_is_nested_and_preserves_area(nx, ny):
    m = mesh.build_rect_mesh((0, np.pi), (0, 1), nx, ny, interface_y=0.0)
    r = mesh.refine(m)
    assert r.n_triangles == 4 * m.n_triangles
    assert r.areas().sum() == pytest.approx(m.areas().sum(), rel=1e-12)
    assert np.all(r.areas() > 0)
    assert r.level == m.level + 1
    assert r.h == pytest.approx(m.h / 2)
    assert np.array_equal(r.vertices[:m.n_vertices], m.vertices)
    assert len(r.tagged_edges(INTERFACE)) == 2 * len(m.tagged_edges(INTERFACE))
    uq.prolongation_matrix(m, r)  # raises unless nested


def test_non_nested_meshes_are_rejected():
    a = mesh.build_rect_mesh((0, np.pi), (0, 1), 3, 2)
    b = mesh.build_rect_mesh((0, np.pi), (0, 1), 5, 4)
    with pytest.raises(MeshError):
        uq.prolongation_matrix(a, b)


def test_coupled_meshes_match_on_interface():
    fluid, porous, imap = mesh.build_coupled_meshes(1 / 8)
    assert np.array_equal(fluid.vertices[imap.fluid_nodes], porous.vertices[imap.porous_nodes])
    assert np.all(np.diff(imap.x) > 0)
    assert imap.length == pytest.approx(np.pi)
    assert imap.n_nodes == round(np.pi * 8) + 1
    assert fluid.shape == (25, 8)


def test_hierarchy_keeps_interface_matched():
    levels = mesh.coupled_hierarchy(0.25, 2)
    assert [lv[0].shape for lv in levels][0] == (13, 4)
    for fluid, porous, imap in levels:
        assert np.array_equal(fluid.vertices[imap.fluid_nodes],
                              porous.vertices[imap.porous_nodes])
    assert levels[2][2].n_nodes == 4 * 13 + 1


@pytest.mark.parametrize("h", [0.0, -0.1])
def test_bad_mesh_size_raises(h):
    with pytest.raises(MeshError):
        mesh.cells_for(h)


def test_bad_cell_counts_raise():
    with pytest.raises(MeshError):
        mesh.build_rect_mesh((0, 1), (0, 1), 0, 2)
    with pytest.raises(MeshError):
        mesh.build_rect_mesh((0, 1), (1, 0), 2, 2)


def test_mesh_arrays_are_read_only():
    m = mesh.build_rect_mesh((0, 1), (0, 1), 2, 2)
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 5.0


def test_dump_writes_all_entities(tmp_path):
    m = mesh.build_rect_mesh((0, 1), (0, 1), 2, 1)
    path = tmp_path / "m.txt"
    m.dump(path)
    lines = path.read_text().splitlines()
    kinds = [ln.split()[0] for ln in lines]
    assert kinds.count("v") == m.n_vertices
    assert kinds.count("t") == m.n_triangles
    assert kinds.count("b") == len(m.boundary_edges)
