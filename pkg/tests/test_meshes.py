import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcox import meshes
from gridcox.errors import OutOfDomainError, ValidationError


def test_minimal_rectangle_split():
    m = meshes.build_tri_mesh(meshes.Rectangle(0, 0, 1, 1), np.sqrt(2.0), 0.0)
    assert m.vertex_count == 4
    assert m.triangle_count == 2


def test_edge_length_bound(arena):
    m = meshes.build_tri_mesh(arena, 5.0, 10.0)
    v = m.vertices
    for cols in ((0, 1), (1, 2), (2, 0)):
        e = np.linalg.norm(v[m.triangles[:, cols[0]]] - v[m.triangles[:, cols[1]]], axis=1)
        assert e.max() <= 5.0 * 1.2
    assert v[:, 0].min() <= -10 and v[:, 0].max() >= 110
    assert v[:, 1].min() <= -10 and v[:, 1].max() >= 110


def test_vertex_count_scaling(arena):
    m5 = meshes.build_tri_mesh(arena, 5.0, 10.0)
    m10 = meshes.build_tri_mesh(arena, 10.0, 10.0)
    ratio = m5.vertex_count / m10.vertex_count
    assert 2.0 <= ratio <= 6.0


def test_degenerate_arena_rejected():
    with pytest.raises(ValidationError):
        meshes.Rectangle(0, 0, 0, 10)
    with pytest.raises(ValidationError):
        meshes.build_tri_mesh(meshes.Rectangle(0, 0, 10, 10), -1.0, 0.0)


def test_positive_areas_and_conforming(small_mesh):
    areas = small_mesh.signed_areas()
    assert np.all(areas > 0)
    # conforming: every edge is shared by at most two triangles
    t = small_mesh.triangles
    edges = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    assert counts.max() <= 2


def test_circular_mesh_knots():
    c = meshes.build_circular_mesh(4)
    assert np.allclose(c.knots, [0, np.pi / 2, np.pi, 3 * np.pi / 2])
    c3 = meshes.build_circular_mesh(3)
    assert np.allclose(c3.arc_lengths(), 2 * np.pi / 3)
    for p in (3, 5, 11, 64):
        cp = meshes.build_circular_mesh(p)
        assert abs(cp.arc_lengths().sum() - 2 * np.pi) < 1e-12
    with pytest.raises(ValidationError):
        meshes.build_circular_mesh(2)


def test_basis_at_vertex_and_midpoint(small_mesh):
    tri0 = small_mesh.triangles[0]
    v = small_mesh.vertices
    bv = small_mesh.basis(v[tri0[0]])
    assert bv.entries == pytest.approx({int(tri0[0]): 1.0})
    mid = 0.5 * (v[tri0[0]] + v[tri0[1]])
    bv = small_mesh.basis(mid)
    assert bv.entries[int(tri0[0])] == pytest.approx(0.5)
    assert bv.entries[int(tri0[1])] == pytest.approx(0.5)


def test_circular_basis_wrap():
    c = meshes.build_circular_mesh(4)
    bv = c.basis(7 * np.pi / 4 + 0.01)
    assert set(bv.entries) == {3, 0}
    assert bv.weight_sum() == pytest.approx(1.0)
    bv = c.basis(np.pi / 2)
    assert bv.entries == pytest.approx({1: 1.0})


def test_temporal_basis():
    tm = meshes.TemporalMesh([0.0, 1.0, 3.0])
    assert tm.basis(0.5).entries == pytest.approx({0: 0.5, 1: 0.5})
    assert tm.basis(3.0).entries == pytest.approx({2: 1.0})
    with pytest.raises(OutOfDomainError):
        tm.interp_weights(4.0)
    with pytest.raises(ValidationError):
        meshes.TemporalMesh([1.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(
    x=st.floats(min_value=-9.9, max_value=109.9),
    y=st.floats(min_value=-9.9, max_value=109.9),
    th=st.floats(min_value=0.0, max_value=2 * np.pi - 1e-9),
)
def test_partition_of_unity(x, y, th):
    m = meshes.build_tri_mesh(meshes.Rectangle(0, 0, 100, 100), 7.0, 10.0)
    bv = m.basis(np.array([x, y]))
    assert abs(bv.weight_sum() - 1.0) < 1e-12
    assert len(bv.entries) <= 3
    assert all(0.0 <= w <= 1.0 for w in bv.entries.values())
    c = meshes.build_circular_mesh(7)
    bc = c.basis(th)
    assert abs(bc.weight_sum() - 1.0) < 1e-12
    assert len(bc.entries) <= 2


def test_partition_of_unity_bulk(small_mesh, circ8):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-19, 119, size=(1000, 2))
    idx = small_mesh.locate_many(pts)
    lam = small_mesh.barycentric(idx, pts)
    assert np.abs(lam.sum(axis=1) - 1.0).max() < 1e-12
    th = rng.uniform(0, 2 * np.pi, 1000)
    _, w = circ8.interp_weights(th)
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-12


def test_locate_matches_exhaustive_scan(small_mesh):
    rng = np.random.default_rng(5)
    pts = rng.uniform(0, 100, size=(1000, 2))
    idx = small_mesh.locate_many(pts)
    lam = small_mesh.barycentric(
        np.broadcast_to(np.arange(small_mesh.triangle_count), (pts.shape[0], small_mesh.triangle_count)),
        pts[:, None, :],
    )
    contained = np.all(lam >= -meshes.BARY_TOL, axis=2)
    brute = np.where(
        contained.any(axis=1),
        np.where(contained, np.arange(small_mesh.triangle_count)[None, :], np.iinfo(np.int64).max).min(axis=1),
        -1,
    )
    assert np.array_equal(idx, brute)


def test_locate_tie_breaks_and_errors(small_mesh):
    centroid = small_mesh.vertices[small_mesh.triangles[7]].mean(axis=0)
    assert small_mesh.locate(centroid) == 7
    # midpoint of the edge shared between triangles 0 and 1 (structured grid)
    t0, t1 = small_mesh.triangles[0], small_mesh.triangles[1]
    shared = sorted(set(t0) & set(t1))
    assert len(shared) == 2
    mid = small_mesh.vertices[shared].mean(axis=0)
    assert small_mesh.locate(mid) == 0
    with pytest.raises(OutOfDomainError):
        small_mesh.locate(np.array([1e4, 1e4]))


def test_mass_stiffness_planar(small_mesh, arena):
    ms = meshes.mass_stiffness(small_mesh)
    inflated = arena.inflate(small_mesh.boundary_margin)
    assert ms.mass_diag.sum() == pytest.approx(inflated.width * inflated.height, rel=1e-10)
    assert np.all(ms.mass_diag > 0)
    ones = np.ones(small_mesh.vertex_count)
    assert np.abs(ms.stiffness @ ones).max() < 1e-10
    dense = ms.stiffness.toarray()
    assert np.abs(dense - dense.T).max() < 1e-12
    assert np.linalg.eigvalsh(dense).min() > -1e-10


def test_mass_stiffness_circular_circulant():
    p = 9
    c = meshes.build_circular_mesh(p)
    ms = meshes.mass_stiffness(c)
    assert ms.mass_diag.sum() == pytest.approx(2 * np.pi, abs=1e-12)
    kap = 1.7
    h = 2 * np.pi / p
    m = (kap**2 * np.diag(ms.mass_diag) + ms.stiffness.toarray())
    first = np.zeros(p)
    first[0] = kap**2 * h + 2.0 / h
    first[1] = first[-1] = -1.0 / h
    assert np.allclose(m[0], first)
    # circulant: every row is a rotation of the first
    for i in range(1, p):
        assert np.allclose(m[i], np.roll(first, i))
    assert np.abs(ms.stiffness @ np.ones(p)).max() < 1e-12


def test_mass_stiffness_temporal():
    tm = meshes.TemporalMesh([0.0, 0.5, 2.0, 3.0])
    ms = meshes.mass_stiffness(tm)
    assert ms.mass_diag.sum() == pytest.approx(3.0, abs=1e-12)
    assert np.abs(ms.stiffness @ np.ones(4)).max() < 1e-12
    # natural ends: first diagonal entry couples only to the first cell
    assert ms.stiffness[0, 0] == pytest.approx(1 / 0.5)
    assert ms.mass_diag[0] == pytest.approx(0.25)


def test_mesh_csv_roundtrip(tmp_path, small_mesh, arena):
    vp = tmp_path / "vertices.csv"
    tp = tmp_path / "triangles.csv"
    meshes.export_mesh_csv(small_mesh, vp, tp)
    back = meshes.import_mesh_csv(vp, tp, arena, small_mesh.boundary_margin)
    assert np.array_equal(back.vertices, small_mesh.vertices)
    assert np.array_equal(back.triangles, small_mesh.triangles)
