import numpy as np
import pytest

from monorecon.field import AnalyticField
from monorecon.geometry import Camera, generate_rays
from monorecon.gradcheck import check_render_mesh
from monorecon.meshrender import face_normals, render_mesh
from monorecon.scenes import make_scene
from monorecon.tets import TriMesh, build_grid, marching_tets

CAM = Camera(90, 0, 1.8, 40, 16, 16)     # eye at +1.8 z, looking down -z
WHITE = AnalyticField(lambda x: np.zeros(x.shape[:-1]))


def _quad(z, half=0.3, flip=False):
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(v, f[:, ::-1] if flip else f)


def _colored(rgb):
    return AnalyticField(lambda x: np.zeros(x.shape[:-1]), lambda x: np.broadcast_to(rgb, x.shape).copy())


def test_empty_mesh_is_background():
    r = render_mesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), WHITE, CAM)
    np.testing.assert_array_equal(r.rgb, 1.0)
    assert not r.mask.any()
    assert not r.backward(np.ones((16, 16, 3))).any()


def test_quad_mask_depth_and_color():
    r = render_mesh(_quad(0.2), _colored([0.2, 0.4, 0.6]), CAM)
    rays = generate_rays(CAM)
    o, d = rays.flat()
    t = (0.2 - o[:, 2]) / d[:, 2]
    p = o + t[:, None] * d
    inside = (np.abs(p[:, 0]) < 0.3) & (np.abs(p[:, 1]) < 0.3)
    np.testing.assert_array_equal(r.mask.reshape(-1) > 0.5, inside)
    np.testing.assert_allclose(r.depth.reshape(-1)[inside], t[inside], rtol=1e-12)
    np.testing.assert_allclose(r.rgb.reshape(-1, 3)[inside], np.tile([0.2, 0.4, 0.6], (inside.sum(), 1)))
    np.testing.assert_array_equal(r.rgb.reshape(-1, 3)[~inside], 1.0)


def test_nearest_hit_wins():
    near, far = _quad(0.3, 0.2), _quad(-0.1, 0.4)
    mesh = TriMesh(np.concatenate([far.vertices, near.vertices]), np.concatenate([far.faces, near.faces + 4]))
    r = render_mesh(mesh, WHITE, CAM)
    d = generate_rays(CAM).directions[8, 8]
    assert r.depth[8, 8] == pytest.approx(-1.5 / d[2], rel=1e-12)
    mesh2 = TriMesh(np.concatenate([near.vertices, far.vertices]), np.concatenate([near.faces, far.faces + 4]))
    np.testing.assert_array_equal(render_mesh(mesh2, WHITE, CAM).depth, r.depth)


def test_normal_shading_of_facing_quad():
    r = render_mesh(_quad(0.0), WHITE, CAM, "normal")
    np.testing.assert_allclose(r.rgb[8, 8], [0.5, 0.5, 1.0])
    r = render_mesh(_quad(0.0, flip=True), WHITE, CAM, "normal")
    np.testing.assert_allclose(r.rgb[8, 8], [0.5, 0.5, 0.0])


def test_lambertian_needs_light():
    with pytest.raises(ValueError):
        render_mesh(_quad(0.0), WHITE, CAM, "lambertian")


def test_sphere_mesh_matches_analytic_render():
    g = build_grid(32)
    g.sdf = 0.5 - np.linalg.norm(g.vertices, axis=1)
    cam = Camera(70, 30, 1.8, 40, 32, 32)
    r = render_mesh(marching_tets(g), WHITE, cam)
    ref = make_scene("sphere").render(cam)
    both = (r.mask > 0.5) & (ref.mask > 0.5)
    assert np.sum(r.mask != ref.mask) <= 0.03 * ref.mask.sum()
    assert np.abs(r.depth[both] - ref.depth[both]).max() < g.cell


def test_color_gradient_matches_finite_differences():
    assert check_render_mesh(seed=0) < 1e-3


def test_depth_gradient_is_exact_for_translation_along_ray():
    mesh = _quad(0.1)
    r = render_mesh(mesh, WHITE, CAM)
    c = np.zeros((16, 16))
    c[8, 8] = 1.0
    dv = r.backward(d_depth=c)
    d = generate_rays(CAM).directions[8, 8]
    # shifting every vertex by e*d moves the hit by e along the ray
    assert np.sum(dv @ d) == pytest.approx(1.0, rel=1e-12)
    e = 1e-6
    moved = TriMesh(mesh.vertices + e * d, mesh.faces)
    fd = (render_mesh(moved, WHITE, CAM).depth[8, 8] - r.depth[8, 8]) / e
    assert fd == pytest.approx(1.0, rel=1e-6)


def test_normal_shading_vertex_gradient():
    rng = np.random.default_rng(0)
    mesh = TriMesh(np.array([[-0.5, -0.4, 0.1], [0.5, -0.3, -0.1], [0.0, 0.5, 0.05]]), np.array([[0, 1, 2]]))
    c = rng.normal(size=(16, 16, 3))
    r = render_mesh(mesh, WHITE, CAM, "normal")
    g = r.backward(c)
    h = 1e-6
    for i in range(3):
        for k in range(3):
            vp, vm = mesh.vertices.copy(), mesh.vertices.copy()
            vp[i, k] += h
            vm[i, k] -= h
            rp = render_mesh(TriMesh(vp, mesh.faces), WHITE, CAM, "normal")
            rm = render_mesh(TriMesh(vm, mesh.faces), WHITE, CAM, "normal")
            both = (rp.mask > 0.5) & (rm.mask > 0.5) & (r.mask > 0.5)
            fd = np.sum(c[both] * (rp.rgb[both] - rm.rgb[both])) / (2 * h)
            assert g[i, k] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_face_normals():
    n, m, ln = face_normals(np.array([[0, 0, 0], [2, 0, 0], [0, 3, 0.0]]), np.array([[0, 1, 2]]))
    np.testing.assert_allclose(n, [[0, 0, 1]])
    assert ln[0] == pytest.approx(6.0)
