import itertools
import math
import time

import numpy as np
import pytest

from monorecon.field import AnalyticField
from monorecon.gradcheck import check_marching_tets
from monorecon.tets import (DEFAULT_DEFORM_CLAMP, ObjParseError, TetGrid, TriMesh, build_grid, euler_characteristic, export_obj,
                            import_obj, init_sdf_from_density, is_consistently_oriented, is_watertight,
                            marching_tets, marching_tets_backward, mesh_edge_counts, signed_mesh_volume,
                            tet_volumes)


def _sphere_grid(n=24, r=0.5):
    g = build_grid(n)
    g.sdf = r - np.linalg.norm(g.vertices, axis=1)
    return g


def _single_tet(sdf):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    return TetGrid(v, np.array([[0, 1, 2, 3]]), np.array(sdf, float), np.zeros((4, 3)), 2, 1.0)


def test_grid_counts():
    g = build_grid(2)
    assert len(g.vertices) == 8 and len(g.tets) == 6
    for n in (3, 5, 7):
        g = build_grid(n)
        assert len(g.vertices) == n ** 3
        assert len(g.tets) == 6 * (n - 1) ** 3
        assert g.cell == pytest.approx(2 / (n - 1))
    with pytest.raises(ValueError):
        build_grid(1)


def test_grid_volumes_positive_and_cover_box():
    g = build_grid(6)
    vol = g.signed_volumes()
    assert np.all(vol > 0)
    assert abs(vol.sum() - 8.0) < 1e-9


def test_grid_points_in_exactly_one_tet():
    g = build_grid(4)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(300, 3))
    v = g.vertices[g.tets]
    # barycentric coordinates of every point in every tet
    m = np.transpose(v[:, 1:] - v[:, :1], (0, 2, 1))
    inv = np.linalg.inv(m)
    b = np.einsum("tij,ptj->pti", inv, pts[:, None, :] - v[None, :, 0])
    inside = np.all(b >= -1e-12, axis=2) & (b.sum(2) <= 1 + 1e-12)
    assert np.all(inside.sum(1) == 1)


def test_grid_faces_shared_by_two_tets_unless_on_boundary():
    g = build_grid(4)
    faces = np.sort(np.concatenate([g.tets[:, [1, 2, 3]], g.tets[:, [0, 2, 3]], g.tets[:, [0, 1, 3]],
                                    g.tets[:, [0, 1, 2]]]), axis=1)
    uniq, counts = np.unique(faces, axis=0, return_counts=True)
    assert set(counts.tolist()) <= {1, 2}
    # a face used once must lie on a face of the box
    for f in uniq[counts == 1]:
        q = g.vertices[f]
        assert any(np.allclose(q[:, k], q[0, k]) and abs(q[0, k]) == 1.0 for k in range(3))


def _min_volume_over_box_corners(frac):
    """Smallest unit-cube Kuhn tet volume over every corner of the offset box [-frac, frac]^3 per vertex.

    Volume is affine in each vertex position separately, so the minimum over the
    box is attained at a corner for each vertex.
    """
    tets = build_grid(2).tets
    base = build_grid(2).vertices / 2.0   # unit cube, cell 1
    corners = np.array(list(itertools.product((-frac, frac), repeat=3)))
    combos = np.array(list(itertools.product(range(8), repeat=4)))
    worst = np.inf
    for t in tets:
        p = base[t][None] + corners[combos]
        e = p[:, 1:] - p[:, :1]
        worst = min(worst, float(np.min(np.linalg.det(e)) / 6))
    return worst


def test_default_clamp_cannot_invert_tets():
    assert _min_volume_over_box_corners(DEFAULT_DEFORM_CLAMP) > 0


def test_looser_clamps_can_invert_tets():
    # worst-case offsets flatten a Kuhn tet at exactly one sixth of a cell
    assert _min_volume_over_box_corners(1 / 6) == pytest.approx(0.0, abs=1e-15)
    assert _min_volume_over_box_corners(0.2) < 0
    assert _min_volume_over_box_corners(0.45) < 0


def test_random_saturated_deforms_keep_volumes_positive():
    g = build_grid(5)
    g.deform = np.random.default_rng(1).choice([-1.0, 1.0], size=g.vertices.shape) * 10.0
    assert np.all(np.abs(g.effective_deform()) <= g.max_offset + 1e-15)
    assert np.all(g.signed_volumes() > 0)


def test_init_sdf_empty_field():
    g = build_grid(4)
    g.deform[:] = 0.1
    init_sdf_from_density(AnalyticField(lambda x: np.zeros(x.shape[:-1])), g, 10.0)
    np.testing.assert_array_equal(g.sdf, -10.0)
    assert not g.deform.any()
    assert marching_tets(g).n_faces == 0


def test_init_sdf_from_sphere_density():
    g = build_grid(16)
    f = AnalyticField(lambda x: np.where(np.linalg.norm(x, axis=-1) < 0.5, 1000.0, 0.0))
    init_sdf_from_density(f, g, 10.0)
    r = np.linalg.norm(g.vertices, axis=1)
    assert np.all((g.sdf > 0) == (r < 0.5))
    mesh = marching_tets(g)
    # a binary density puts the crossing anywhere on an edge; the longest Kuhn edge is sqrt(3) cells
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)
    assert err.max() < math.sqrt(3) * g.cell
    assert is_watertight(mesh)


def test_all_outside_is_empty():
    g = build_grid(5)
    g.sdf[:] = -1
    m = marching_tets(g)
    assert m.n_vertices == 0 and m.n_faces == 0


def test_single_tet_one_inside_gives_midpoint_triangle():
    g = _single_tet([1, -1, -1, -1])
    m = marching_tets(g)
    assert m.n_faces == 1
    want = {(0.5, 0, 0), (0, 0.5, 0), (0, 0, 0.5)}
    assert {tuple(np.round(v, 12)) for v in m.vertices} == want
    # normal points away from the inside corner (the origin)
    a, b, c = m.vertices[m.faces[0]]
    assert np.dot(np.cross(b - a, c - a), (a + b + c) / 3) > 0


def test_single_tet_two_inside_gives_quad():
    g = _single_tet([1, 1, -1, -1])
    m = marching_tets(g)
    assert m.n_faces == 2 and m.n_vertices == 4
    assert np.all(m.face_areas() > 1e-12)
    out_dir = np.array([0, 0.5, 0.5]) - np.array([0.5, 0, 0])
    for f in m.faces:
        a, b, c = m.vertices[f]
        assert np.dot(np.cross(b - a, c - a), out_dir) > 0


def test_single_tet_three_inside():
    m = marching_tets(_single_tet([1, 1, 1, -1]))
    assert m.n_faces == 1
    a, b, c = m.vertices[m.faces[0]]
    # outside corner is (0, 0, 1)
    assert np.dot(np.cross(b - a, c - a), [0, 0, 1]) > 0


def test_sphere_mesh_audit():
    t0 = time.perf_counter()
    g = _sphere_grid(24)
    m = marching_tets(g)
    elapsed = time.perf_counter() - t0
    assert is_watertight(m)
    assert is_consistently_oriented(m)
    assert euler_characteristic(m) == 2
    assert np.abs(np.linalg.norm(m.vertices, axis=1) - 0.5).max() < g.cell
    assert np.all(m.face_areas() > 1e-12)
    assert signed_mesh_volume(m) == pytest.approx(4 / 3 * np.pi * 0.125, rel=0.05)
    assert m.faces.min() >= 0 and m.faces.max() < m.n_vertices
    assert elapsed < 10


def test_edge_counts_audit_matches_python_oracle():
    m = marching_tets(_sphere_grid(10))
    counts = {}
    for f in m.faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            k = (min(a, b), max(a, b))
            counts[k] = counts.get(k, 0) + 1
    uniq, c = mesh_edge_counts(m.faces)
    assert dict(zip(map(tuple, uniq.tolist()), c.tolist())) == counts


def test_surface_vertices_on_deformed_edges():
    rng = np.random.default_rng(2)
    g = _sphere_grid(12)
    g.deform = rng.uniform(-1, 1, size=g.vertices.shape) * g.max_offset
    m = marching_tets(g)
    assert np.all((m.lam >= 0) & (m.lam <= 1))
    vd = g.deformed_vertices()
    i, j = m.edges.T
    np.testing.assert_allclose(m.vertices, (1 - m.lam)[:, None] * vd[i] + m.lam[:, None] * vd[j], atol=1e-14)
    # each provenance edge is an edge of a tet
    tet_edges = {tuple(sorted(e)) for t in g.tets for e in itertools.combinations(t.tolist(), 2)}
    assert all(tuple(e) in tet_edges for e in m.edges.tolist())


def test_sign_flip_reverses_winding():
    g = _sphere_grid(10)
    a = marching_tets(g)
    g.sdf = -g.sdf
    b = marching_tets(g)
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-15)
    fa = {tuple(f) for f in a.faces.tolist()}
    fb = {tuple(f[::-1]) for f in b.faces.tolist()}
    rot = lambda f: min(f[k:] + f[:k] for k in range(3))
    assert {rot(f) for f in fa} == {rot(f) for f in fb}


def test_exact_zeros_still_watertight():
    g = build_grid(9)
    # plane through lattice vertices: many s == 0 exactly
    g.sdf = np.where(np.linalg.norm(g.vertices, axis=1) <= 0.5, 0.5 - np.linalg.norm(g.vertices, axis=1), -1.0)
    assert np.any(g.sdf == 0.0)
    m = marching_tets(g)
    assert is_watertight(m) and is_consistently_oriented(m)


def test_vertex_gradients_match_finite_differences():
    assert check_marching_tets(seed=0) < 1e-6


def test_sdf_gradient_single_edge():
    g = _single_tet([0.3, -0.7, -0.2, -0.9])
    m = marching_tets(g)
    c = np.random.default_rng(3).normal(size=(m.n_vertices, 3))
    d_sdf, d_def = marching_tets_backward(g, m, c)
    h = 1e-7
    for k in range(4):
        gp, gm = _single_tet(g.sdf.copy()), _single_tet(g.sdf.copy())
        gp.sdf[k] += h
        gm.sdf[k] -= h
        fd = (np.sum(c * marching_tets(gp).vertices) - np.sum(c * marching_tets(gm).vertices)) / (2 * h)
        assert d_sdf[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_clamped_deform_gets_no_gradient():
    g = _sphere_grid(8)
    g.deform[:] = 0.0
    g.deform[::2] = 5.0
    m = marching_tets(g)
    _, d_def = marching_tets_backward(g, m, np.ones((m.n_vertices, 3)))
    assert not d_def[::2].any()
    assert d_def[1::2].any()


def test_obj_single_triangle(tmp_path):
    m = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    p = tmp_path / "t.obj"
    export_obj(m, p)
    lines = p.read_text().splitlines()
    assert [l.split()[0] for l in lines] == ["v", "v", "v", "f"]
    assert lines[-1] == "f 1 2 3"


def test_obj_roundtrip_is_exact(tmp_path):
    g = _sphere_grid(12)
    g.deform = np.random.default_rng(4).uniform(-1, 1, g.vertices.shape) * g.max_offset
    m = marching_tets(g)
    p = tmp_path / "s.obj"
    export_obj(m, p)
    back = import_obj(p)
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.faces, m.faces)
    assert is_watertight(back)


def test_obj_empty_mesh(tmp_path):
    p = tmp_path / "e.obj"
    export_obj(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), p)
    assert p.read_text() == ""
    back = import_obj(p)
    assert back.n_vertices == 0 and back.n_faces == 0


@pytest.mark.parametrize("body,lineno", [
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", 4),
    ("v 0 0\n", 1),
    ("v 0 0 0\n# ok\nbogus 1\n", 3),
    ("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 1\nf 1 2 3 4\n", 5),
    ("v a b c\n", 1),
])
def test_obj_parse_errors_name_the_line(tmp_path, body, lineno):
    p = tmp_path / "bad.obj"
    p.write_text(body)
    with pytest.raises(ObjParseError, match=f"bad.obj:{lineno}:"):
        import_obj(p)


def test_obj_negative_and_slashed_indices(tmp_path):
    p = tmp_path / "n.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3 -2/1/1 3//1\n")
    m = import_obj(p)
    np.testing.assert_array_equal(m.faces, [[0, 1, 2]])


def test_tet_volume_of_unit_simplex():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    assert tet_volumes(v, np.array([[0, 1, 2, 3]]))[0] == pytest.approx(1 / 6)
    assert tet_volumes(v, np.array([[0, 2, 1, 3]]))[0] == pytest.approx(-1 / 6)
