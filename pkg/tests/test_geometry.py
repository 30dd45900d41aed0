import numpy as np
import pytest

from roughfem import geometry
from roughfem.geometry import (ROUGH, DIRICHLET, T1, T2, T3, GeometryError,
                               MeshError, cosine_profile, flat_profile,
                               make_random_profile, build_coarse_mesh,
                               build_reference_mesh, build_cell_mesh,
                               element_frame, arc_length_ratio, write_mesh,
                               read_mesh)


EPS = 1 / 16


def test_cosine_profile_values():
    prof = cosine_profile(EPS)
    # gamma(t) = (cos(2 pi t) - 1)/10, height = eps * gamma(x/eps)
    assert prof.height(0.0) == pytest.approx(0.0, abs=1e-15)
    assert prof.height(EPS / 2) == pytest.approx(EPS * (-0.2), abs=1e-14)
    assert prof.height(EPS) == pytest.approx(0.0, abs=1e-13)
    assert np.all(prof.height(np.linspace(0, 1, 101)) <= 1e-15)


def test_profile_rejects_outside_domain():
    prof = cosine_profile(EPS)
    with pytest.raises(GeometryError):
        prof.height(1.5)


def test_flat_profile_is_zero():
    prof = flat_profile()
    assert np.all(prof.height(np.linspace(0, 1, 57)) == 0.0)


def test_random_profile_reproducible_and_bounded():
    a = make_random_profile(M=16, seed=7, scale=0.1, epsilon=1 / 16)
    b = make_random_profile(M=16, seed=7, scale=0.1, epsilon=1 / 16)
    x = np.linspace(0, 1, 200)
    assert np.array_equal(a.height(x), b.height(x))
    # values - 1 in [-1, 0] scaled by scale * eps
    assert np.all(a.height(x) <= 0.0)
    assert np.all(a.height(x) >= -0.1 / 16 - 1e-15)
    c = make_random_profile(M=16, seed=8, scale=0.1, epsilon=1 / 16)
    assert not np.array_equal(a.height(x), c.height(x))


def test_random_profile_validation():
    with pytest.raises(GeometryError):
        make_random_profile(M=1, seed=0)
    with pytest.raises(GeometryError):
        make_random_profile(M=8, seed=0, scale=0.0)


def test_arc_length_ratio_flat_and_cosine():
    assert arc_length_ratio(flat_profile(), 0.0, 1.0) == pytest.approx(1.0)
    # one full period of the rescaled cosine boundary has ratio r
    prof = cosine_profile(EPS)
    r = arc_length_ratio(prof, 0.0, EPS)
    assert r == pytest.approx(1.0923835473311776, abs=1e-9)


def test_coarse_mesh_structure():
    prof = cosine_profile(EPS)
    mesh = build_coarse_mesh(prof, 8)
    assert mesh.num_vertices == 81
    assert mesh.num_triangles == 128
    counts = np.bincount(mesh.element_class, minlength=4)
    assert counts[T1] == 8          # one rough-edge element per column
    assert counts[T2] == 8
    assert counts[T1] + counts[T2] + counts[T3] == 128
    assert np.all(mesh.areas() > 0)
    assert mesh.min_angle() >= 15.0
    # bottom vertices sit on the curve
    rough_nodes = mesh.tagged_nodes(ROUGH)
    v = mesh.vertices[rough_nodes]
    assert np.allclose(v[:, 1], prof.height(v[:, 0]), atol=1e-14)


def test_coarse_mesh_rejects_tiny_N():
    with pytest.raises(GeometryError):
        build_coarse_mesh(flat_profile(), 1)


def test_coarse_mesh_min_angle_guard():
    # amplitude far too deep for the grid spacing
    prof = geometry.periodic_profile(0.5, lambda t: -3.0 * (1 - np.cos(2 * np.pi * t)),
                                     lambda t: -6.0 * np.pi * np.sin(2 * np.pi * t))
    with pytest.raises(MeshError):
        build_coarse_mesh(prof, 4)


def test_reference_mesh_graded_positive():
    prof = cosine_profile(EPS)
    mesh = build_reference_mesh(prof, EPS / 5)
    assert np.all(mesh.areas() > 0)
    assert mesh.num_vertices == (5 * 16 + 1) ** 2


def test_element_frame_and_rescaling():
    prof = cosine_profile(EPS)
    mesh = build_coarse_mesh(prof, 8)
    e = int(np.flatnonzero(mesh.element_class == T1)[0])
    frame = element_frame(mesh, e)
    assert frame.scale == pytest.approx(1 / 8)
    # round trip
    pts = np.array([[0.3, 0.2], [0.0, 0.0]])
    phys = frame.to_physical(pts)
    back = frame.to_rescaled(phys)
    assert np.allclose(back, pts, atol=1e-14)
    # rescaled rough endpoints at unit separation in x
    assert frame.v_rescaled[0, 0] == pytest.approx(0.0)
    assert frame.v_rescaled[1, 0] == pytest.approx(1.0)
    n = frame.chord_normal()
    assert np.linalg.norm(n) == pytest.approx(1.0)
    assert n[1] < 0  # points away from the apex, i.e. downward


def test_cell_mesh_tags_and_conformity():
    prof = cosine_profile(EPS)
    mesh = build_coarse_mesh(prof, 8)
    e = int(np.flatnonzero(mesh.element_class == T1)[0])
    frame = element_frame(mesh, e)
    cell = build_cell_mesh(frame, prof, EPS / 20)
    assert np.all(cell.areas() > 0)
    rough = cell.tagged_edges(ROUGH)
    assert len(rough) >= 2
    # rough polyline endpoints coincide with the rescaled element corners
    xs = cell.vertices[np.unique(rough), 0]
    assert xs.min() == pytest.approx(0.0, abs=1e-13)
    assert xs.max() == pytest.approx(1.0, abs=1e-13)
    # Dirichlet part covers the two straight edges
    dir_nodes = cell.tagged_nodes(DIRICHLET)
    assert len(dir_nodes) > 0


def test_cell_mesh_flat_profile_straight_bottom():
    prof = flat_profile()
    mesh = build_coarse_mesh(prof, 4)
    e = int(np.flatnonzero(mesh.element_class == T1)[0])
    frame = element_frame(mesh, e)
    cell = build_cell_mesh(frame, prof, 0.05)
    rough_nodes = cell.tagged_nodes(ROUGH)
    assert np.allclose(cell.vertices[rough_nodes, 1], 0.0, atol=1e-14)


def test_locate_exact_and_fallback():
    prof = cosine_profile(EPS)
    mesh = build_coarse_mesh(prof, 8)
    rng = np.random.default_rng(3)
    pts = rng.random((200, 2)) * [1.0, 0.8] + [0.0, 0.1]
    tri, bary, exact = mesh.locate(pts)
    assert np.all(exact)
    assert np.all(bary >= -1e-12)
    # interpolating the coordinates recovers the points
    rec = np.einsum("pk,pkd->pd", bary, mesh.vertices[mesh.triangles[tri]])
    assert np.allclose(rec, pts, atol=1e-12)
    # a point outside the domain needs the fallback
    out = np.array([[0.5, 1.5]])
    with pytest.raises(geometry.LocationError):
        mesh.locate(out)
    tri2, _, exact2 = mesh.locate(out, nearest_fallback=True)
    assert not exact2[0]
    assert 0 <= tri2[0] < mesh.num_triangles


def test_mesh_roundtrip(tmp_path):
    prof = cosine_profile(EPS)
    mesh = build_coarse_mesh(prof, 6)
    path = tmp_path / "m.txt"
    write_mesh(mesh, str(path))
    back = read_mesh(str(path))
    assert np.array_equal(back.triangles, mesh.triangles)
    assert np.array_equal(back.vertices, mesh.vertices)
    assert np.array_equal(back.edge_tags, mesh.edge_tags)
    assert np.array_equal(back.element_class, mesh.element_class)


def test_profile_json_roundtrip():
    prof = cosine_profile(EPS)
    back = geometry.BoundaryProfile.from_json(prof.to_json())
    x = np.linspace(0, 1, 33)
    assert np.allclose(back.height(x), prof.height(x), atol=1e-15)
    rnd = make_random_profile(M=12, seed=5, random_abscissae=True, scale=1.0,
                              epsilon=1 / 12)
    back2 = geometry.BoundaryProfile.from_json(rnd.to_json())
    assert np.array_equal(back2.height(x), rnd.height(x))


def test_steep_random_profile_meshes():
    # amplitude eps with random knots: exercises the diagonal flip
    prof = make_random_profile(M=16, seed=42, random_abscissae=True, scale=1.0,
                               epsilon=1 / 16)
    mesh = build_coarse_mesh(prof, 8)
    assert np.all(mesh.areas() > 0)
    counts = np.bincount(mesh.element_class, minlength=4)
    assert counts[T1] == 8
