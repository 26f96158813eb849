"""Finite-difference checks of every analytic backward pass.

Each check builds a small deterministic problem, wraps it as a loss over a
ParamStore and compares analytic and central-difference gradients on a random
subset of entries that receive gradient.
"""

from __future__ import annotations

import time

import numpy as np

from .field import RadianceField
from .geometry import Camera
from .hashgrid import HashGrid
from .losses import depth_pearson_loss, gaussian_blur, normal_smoothness_loss
from .meshrender import render_mesh
from .optim import ParamStore, finite_diff_check
from .tets import build_grid, marching_tets, marching_tets_backward
from .volume import render_view

TOLERANCE = 1e-3


def check_hashgrid(seed: int = 0, n_points: int = 64) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    grid = HashGrid(store, rng=rng, init_scale=0.1)
    x = rng.uniform(-1, 1, size=(n_points, 3))
    c = rng.normal(size=(n_points, grid.out_dim))

    def loss(s):
        y = grid.encode(x)
        grid.backward(x, c * np.cos(y))
        return float(np.sum(np.sin(y) * c))
    return finite_diff_check(loss, store, h=1e-6, subset_size=32, rng=rng, active_only=True)


def _textured_field(seed, rng):
    # The fresh table is ~1e-4, the same size as the probe step, so probes would
    # cross ReLU kinks; a table with O(0.1) entries resembles a trained field.
    field = RadianceField(seed=seed)
    t = field.store.values["field.table"]
    t[...] = rng.uniform(-0.3, 0.3, t.shape)
    return field


def _small_camera(size=8):
    return Camera(80.0, 20.0, 1.8, 40.0, size, size)


def check_render_view(seed: int = 0, shading: str = "albedo") -> float:
    """Photometric + mask MSE of an 8x8 volume render against a random target."""
    rng = np.random.default_rng(seed)
    field = _textured_field(seed, rng)
    cam = _small_camera()
    target = rng.uniform(size=(8, 8, 3))
    light = np.array([0.3, 0.5, 0.81]) / np.linalg.norm([0.3, 0.5, 0.81])

    def loss(s):
        r = render_view(field, cam, shading, light, n_samples=24)
        res = r.rgb - target
        r.backward(2 * res / res.size, 2 * (r.mask - 0.5) / r.mask.size, None)
        return float(np.mean(res ** 2) + np.mean((r.mask - 0.5) ** 2))
    return finite_diff_check(loss, field.store, h=1e-4, subset_size=32, rng=rng, active_only=True)


def check_depth_pearson(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.add("depth", rng.uniform(1, 2, size=(12, 12)))
    ref = rng.uniform(1, 2, size=(12, 12))
    mask = (rng.uniform(size=(12, 12)) > 0.3).astype(float)

    def loss(s):
        val, g = depth_pearson_loss(s.values["depth"], ref, mask)
        s.grads["depth"] += g
        return val
    return finite_diff_check(loss, store, h=1e-6, subset_size=32, rng=rng)


def check_normal_smoothness(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    n = rng.normal(size=(12, 12, 3))
    store.add("normals", n / np.linalg.norm(n, axis=-1, keepdims=True))
    mask = (rng.uniform(size=(12, 12)) > 0.3).astype(float)
    frozen = gaussian_blur(store.values["normals"])

    def loss(s):
        val, g = normal_smoothness_loss(s.values["normals"], mask, blurred=frozen)
        s.grads["normals"] += g
        return val
    return finite_diff_check(loss, store, h=1e-6, subset_size=32, rng=rng, active_only=True)


def _jittered_sphere_grid(rng, resolution=10):
    grid = build_grid(resolution)
    s = 0.55 - np.linalg.norm(grid.vertices, axis=1) + rng.uniform(-0.02, 0.02, len(grid.vertices))
    # keep every vertex clear of zero so no sign flips under the probe step
    s = np.where(np.abs(s) < 1e-3, np.sign(s + 1e-12) * 1e-3, s)
    grid.sdf = s
    grid.deform = rng.uniform(-0.5, 0.5, size=grid.vertices.shape) * grid.max_offset
    return grid


def check_marching_tets(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    grid = _jittered_sphere_grid(rng)
    store = ParamStore()
    grid.sdf = store.add("sdf", grid.sdf)
    grid.deform = store.add("deform", grid.deform)
    mesh0 = marching_tets(grid)
    c = rng.normal(size=(mesh0.n_vertices, 3))

    def loss(s):
        mesh = marching_tets(grid)
        if mesh.n_vertices != len(c):
            raise RuntimeError("topology changed during the check")
        d_sdf, d_def = marching_tets_backward(grid, mesh, c)
        s.grads["sdf"] += d_sdf
        s.grads["deform"] += d_def
        return float(np.sum(c * mesh.vertices))
    return finite_diff_check(loss, store, h=1e-6, subset_size=32, rng=rng, active_only=True)


def check_render_mesh(seed: int = 0) -> float:
    """MSE of an 8x8 mesh render wrt the color field parameters."""
    rng = np.random.default_rng(seed)
    grid = _jittered_sphere_grid(rng)
    mesh = marching_tets(grid)
    field = _textured_field(seed, rng)
    cam = _small_camera()
    target = rng.uniform(size=(8, 8, 3))

    def loss(s):
        r = render_mesh(mesh, field, cam, "albedo")
        res = r.rgb - target
        r.backward(2 * res / res.size)
        return float(np.mean(res ** 2))
    # gradients here are ~1e-8, so a smaller step loses to roundoff
    return finite_diff_check(loss, field.store, h=1e-4, subset_size=32, rng=rng, active_only=True)


CHECKS = {
    "hashgrid.encode": check_hashgrid,
    "volume.render_view": check_render_view,
    "volume.render_view[lambertian]": lambda seed=0: check_render_view(seed, "lambertian"),
    "losses.depth_pearson": check_depth_pearson,
    "losses.normal_smoothness": check_normal_smoothness,
    "tets.marching_tets": check_marching_tets,
    "meshrender.render_mesh": check_render_mesh,
}


def run_gradcheck(seed: int = 0, checks=None) -> dict[str, tuple[float, float]]:
    """name -> (max relative error, seconds)."""
    out = {}
    for name in (checks or CHECKS):
        t0 = time.perf_counter()
        err = CHECKS[name](seed)
        out[name] = (float(err), time.perf_counter() - t0)
    return out
