"""Analytic scenes with exact renders, used as ground truth and as the 3D-prior oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .field import AnalyticField
from .geometry import Camera, generate_rays
from .volume import BACKGROUND, shade, needs_normals

TRACE_STEPS = 512
TRACE_EPS = 1e-9
NORMAL_H = 1e-6
DEPTH_AFFINE = (0.7, 0.3)


def sdf_sphere(center, radius):
    c = np.asarray(center, dtype=np.float64)
    return lambda x: np.linalg.norm(x - c, axis=-1) - radius


def sdf_box(half):
    b = np.asarray(half, dtype=np.float64)

    def f(x):
        q = np.abs(x) - b
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(-1), 0.0)
    return f


def smooth_union(a, b, k):
    def f(x):
        da, db = a(x), b(x)
        h = np.clip(0.5 + 0.5 * (db - da) / k, 0.0, 1.0)
        return db * (1 - h) + da * h - k * h * (1 - h)
    return f


@dataclass
class SceneRender:
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    normals: np.ndarray


@dataclass
class SyntheticScene:
    name: str
    sdf: Callable[[np.ndarray], np.ndarray]
    albedo: Callable[[np.ndarray], np.ndarray]

    def normal(self, x: np.ndarray) -> np.ndarray:
        g = np.empty_like(x)
        for k in range(3):
            e = np.zeros(3)
            e[k] = NORMAL_H
            g[:, k] = self.sdf(x + e) - self.sdf(x - e)
        return g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)

    def trace(self, origins, directions, t_near, t_far):
        """Sphere-trace rays; returns (hit mask, t)."""
        n = origins.shape[0]
        t = np.full(n, float(t_near))
        hit = np.zeros(n, dtype=bool)
        live = np.ones(n, dtype=bool)
        for _ in range(TRACE_STEPS):
            idx = np.flatnonzero(live)
            if idx.size == 0:
                break
            d = self.sdf(origins[idx] + t[idx, None] * directions[idx])
            done = d < TRACE_EPS
            hit[idx[done]] = True
            t[idx[~done]] += d[~done]
            gone = t[idx] > t_far
            live[idx[done | gone]] = False
        return hit & (t <= t_far), t

    def render(self, camera: Camera, shading: str = "albedo", light=None) -> SceneRender:
        rays = generate_rays(camera)
        o, d = rays.flat()
        hit, t = self.trace(o, d, rays.t_near, rays.t_far)
        h, w = camera.shape
        rgb = np.full((h * w, 3), BACKGROUND)
        normals = np.zeros((h * w, 3))
        depth = np.zeros(h * w)
        if hit.any():
            p = o[hit] + t[hit, None] * d[hit]
            n = self.normal(p)
            normals[hit] = n
            alb = self.albedo(p)
            if needs_normals(shading) and shading != "normal" and light is None:
                raise ValueError(f"{shading} shading needs a light direction")
            rgb[hit] = shade(shading, alb, n, light)
            depth[hit] = t[hit]
        return SceneRender(rgb.reshape(h, w, 3), hit.astype(np.float64).reshape(h, w), depth.reshape(h, w),
                           normals.reshape(h, w, 3))

    def density_field(self, sigma_in: float = 1000.0, sharpness: float | None = None) -> AnalyticField:
        """Volumetric stand-in: sigma_in inside the surface, 0 outside (optionally a smooth step)."""
        def dens(x):
            s = -self.sdf(x.reshape(-1, 3)).reshape(x.shape[:-1])
            if sharpness is None:
                return np.where(s >= 0, sigma_in, 0.0)
            return sigma_in * 0.5 * (1 + np.tanh(sharpness * s))
        return AnalyticField(dens, lambda x: self.albedo(x.reshape(-1, 3)).reshape(x.shape))


def _sphere_albedo(x):
    return np.clip(np.stack([0.6 + 0.3 * x[:, 0], 0.5 + 0.3 * x[:, 1], 0.4 + 0.3 * x[:, 2]], axis=1), 0, 1)


def _box_albedo(x):
    return np.clip(np.stack([0.3 + 0.2 * x[:, 1], 0.55 + 0.2 * x[:, 0], 0.7 - 0.2 * x[:, 2]], axis=1), 0, 1)


def _snowman_albedo(x):
    top = x[:, 1] > 0.1
    base = np.stack([0.85 + 0.1 * x[:, 0], 0.85 + 0.05 * x[:, 1], 0.9 - 0.1 * x[:, 2]], axis=1)
    head = np.stack([0.9 - 0.1 * x[:, 2], 0.6 + 0.2 * x[:, 0], 0.4 + 0.1 * x[:, 1]], axis=1)
    return np.clip(np.where(top[:, None], head, base), 0, 1)


PRESETS = ("sphere", "box", "snowman")


def make_scene(preset: str = "sphere") -> SyntheticScene:
    if preset == "sphere":
        return SyntheticScene("sphere", sdf_sphere((0, 0, 0), 0.5), _sphere_albedo)
    if preset == "box":
        return SyntheticScene("box", sdf_box((0.4, 0.35, 0.3)), _box_albedo)
    if preset == "snowman":
        body = sdf_sphere((0, -0.25, 0), 0.4)
        head = sdf_sphere((0, 0.35, 0), 0.28)
        return SyntheticScene("snowman", smooth_union(body, head, 0.1), _snowman_albedo)
    raise ValueError(f"unknown scene preset {preset!r}; expected one of {PRESETS}")


@dataclass
class ReferenceBundle:
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    camera: Camera


def synthesize_reference(scene: SyntheticScene, camera: Camera, depth_affine=DEPTH_AFFINE) -> ReferenceBundle:
    """Exact reference render; the depth goes through a positive affine map on the foreground.

    Pass depth_affine=None for raw ray distances. Background depth stays 0, so mask == (depth > 0).
    """
    r = scene.render(camera)
    depth = r.depth.copy()
    if depth_affine is not None:
        a, b = depth_affine
        if a <= 0 or b < 0:
            raise ValueError("depth warp must be a positive scale with a non-negative offset")
        fg = r.mask > 0.5
        depth[fg] = a * depth[fg] + b
    return ReferenceBundle(r.rgb, r.mask, depth, camera)
