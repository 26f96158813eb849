"""Stratified volume rendering of a radiance field, with an analytic backward pass.

Per ray, with s_i = sigma_i * delta_i:

    T_i = exp(-sum_{j<i} s_j),  alpha_i = 1 - exp(-s_i),  w_i = T_i alpha_i
    rgb = sum w_i c_i + (1 - sum w_i) * white
    depth = sum w_i t_i / max(sum w_i, 1e-6)

and for the backward pass, with g_i = dL/dw_i,

    dL/ds_k = g_k T_{k+1} - sum_{i>k} g_i w_i .
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import N_PROBES, normal_offsets, normals_backward, normals_from_probes
from .geometry import Camera, Ray, camera_space_directions, generate_rays

SHADINGS = ("albedo", "lambertian", "textureless", "normal")
AMBIENT, DIFFUSE = 0.1, 0.9
TEXTURELESS_GRAY = 0.5
BACKGROUND = 1.0
DEPTH_EPS = 1e-6
NORMAL_FALLBACK = np.array([0.0, 0.0, 1.0])


def shade(mode: str, albedo: np.ndarray, normals: np.ndarray | None, light) -> np.ndarray:
    if mode == "albedo":
        return albedo
    if mode == "normal":
        return (normals + 1.0) * 0.5
    ndl = np.maximum(normals @ np.asarray(light, dtype=np.float64), 0.0)
    factor = AMBIENT + DIFFUSE * ndl
    if mode == "lambertian":
        return albedo * factor[:, None]
    if mode == "textureless":
        return np.repeat((TEXTURELESS_GRAY * factor)[:, None], 3, axis=1)
    raise ValueError(f"unknown shading {mode!r}; expected one of {SHADINGS}")


def shade_backward(mode: str, dc: np.ndarray, albedo, normals, light):
    """Returns (d_albedo, d_normals); either may be None when it does not depend on it."""
    if mode == "albedo":
        return dc, None
    if mode == "normal":
        return None, 0.5 * dc
    light = np.asarray(light, dtype=np.float64)
    ndl = normals @ light
    lit = (ndl > 0).astype(np.float64)
    factor = AMBIENT + DIFFUSE * np.maximum(ndl, 0.0)
    if mode == "lambertian":
        dfac = np.sum(dc * albedo, axis=1)
        dalb = dc * factor[:, None]
    else:
        dfac = TEXTURELESS_GRAY * np.sum(dc, axis=1)
        dalb = None
    dn = (dfac * DIFFUSE * lit)[:, None] * light[None, :]
    return dalb, dn


def needs_normals(mode: str) -> bool:
    if mode not in SHADINGS:
        raise ValueError(f"unknown shading {mode!r}; expected one of {SHADINGS}")
    return mode != "albedo"


def stratified_samples(n_rays: int, t_near: float, t_far: float, n_samples: int, rng=None):
    """Sample depths (R, S) with one uniform jitter per bin, and their deltas."""
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    width = (t_far - t_near) / n_samples
    edges = t_near + width * np.arange(n_samples)
    u = np.full((n_rays, n_samples), 0.5) if rng is None else rng.random((n_rays, n_samples))
    t = edges[None, :] + u * width
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = width
    return t, delta


def composite_weights(sigma: np.ndarray, delta: np.ndarray):
    """Transmittance before each sample, alpha and weights; all (R, S)."""
    s = sigma * delta
    excl = np.cumsum(s, axis=1) - s
    T = np.exp(-excl)
    alpha = -np.expm1(-s)
    return T, alpha, T * alpha


@dataclass
class _Chunk:
    rays: slice
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    albedo: np.ndarray
    normals: np.ndarray | None
    color: np.ndarray
    T: np.ndarray
    w: np.ndarray
    acc: np.ndarray
    depth: np.ndarray
    cache: object
    sel: np.ndarray | None = None
    probe_cache: object = None
    probe_g: np.ndarray | None = None
    probe_norm: np.ndarray | None = None


@dataclass
class RayBatchRender:
    """Outputs for a flat batch of rays plus what the backward pass needs."""

    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    field: object = dc_field(repr=False)
    shading: str = "albedo"
    light: np.ndarray | None = None
    chunks: list = dc_field(default_factory=list, repr=False)

    def transmittance_final(self) -> np.ndarray:
        out = np.empty(self.alpha.shape)
        for ch in self.chunks:
            s = ch.sigma * ch.delta
            out[ch.rays] = np.exp(-s.sum(1))
        return out

    def weights(self) -> np.ndarray:
        return np.concatenate([ch.w for ch in self.chunks], axis=0)

    def backward(self, d_rgb=None, d_alpha=None, d_depth=None, grads=None):
        n = self.alpha.shape[0]
        d_rgb = np.zeros((n, 3)) if d_rgb is None else np.asarray(d_rgb, dtype=np.float64).reshape(n, 3)
        d_alpha = np.zeros(n) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64).reshape(n)
        d_depth = np.zeros(n) if d_depth is None else np.asarray(d_depth, dtype=np.float64).reshape(n)
        for ch in self.chunks:
            self._backward_chunk(ch, d_rgb[ch.rays], d_alpha[ch.rays], d_depth[ch.rays], grads)

    def _backward_chunk(self, ch: _Chunk, dC, dA, dD, grads):
        acc = ch.acc
        a = np.maximum(acc, DEPTH_EPS)
        live = (acc > DEPTH_EPS).astype(np.float64)
        gw = np.einsum("rk,rsk->rs", dC, ch.color - BACKGROUND) + dA[:, None]
        gw += dD[:, None] * (ch.t - (ch.depth * live)[:, None]) / a[:, None]
        gww = gw * ch.w
        after = np.cumsum(gww[:, ::-1], axis=1)[:, ::-1] - gww
        t_next = ch.T * np.exp(-ch.sigma * ch.delta)
        dsigma = (gw * t_next - after) * ch.delta

        dc = (ch.w[..., None] * dC[:, None, :]).reshape(-1, 3)
        n = dc.shape[0]
        dalb, dn = shade_backward(self.shading, dc, ch.albedo.reshape(n, 3),
                                  None if ch.normals is None else ch.normals.reshape(n, 3), self.light)
        if dn is not None and ch.sel is not None and ch.sel.any():
            dsigp = normals_backward(dn[ch.sel], ch.probe_g, ch.probe_norm)
            self.field.backward(ch.probe_cache, dsigp.reshape(-1), None, grads=grads)
        self.field.backward(ch.cache, dsigma.reshape(-1), dalb, grads=grads)


def render_rays(field, origins, directions, t_near, t_far, n_samples: int = 32, shading: str = "albedo",
                light_dir=None, rng=None, normal_cutoff: float = 0.0, chunk_points: int = 1 << 17):
    """Volume-render a flat batch of rays; returns a RayBatchRender.

    `normal_cutoff` skips the six-probe normal estimate for samples whose weight
    is below it (their shading uses the fallback normal); 0 evaluates every sample.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n_rays = origins.shape[0]
    with_normals = needs_normals(shading)
    light = None if light_dir is None else np.asarray(light_dir, dtype=np.float64)
    if with_normals and shading != "normal" and light is None:
        raise ValueError(f"{shading} shading needs a light direction")
    t_all, delta_all = stratified_samples(n_rays, t_near, t_far, n_samples, rng)

    out = RayBatchRender(np.empty((n_rays, 3)), np.empty(n_rays), np.empty(n_rays), field, shading, light)
    step = max(1, chunk_points // n_samples)
    for lo in range(0, n_rays, step):
        sl = slice(lo, min(lo + step, n_rays))
        t, delta = t_all[sl], delta_all[sl]
        r = t.shape[0]
        x = origins[sl, None, :] + t[..., None] * directions[sl, None, :]
        sigma, albedo, cache = field.forward(x.reshape(-1, 3))
        sigma = sigma.reshape(r, n_samples)
        albedo = albedo.reshape(r, n_samples, 3)
        T, _, w = composite_weights(sigma, delta)
        acc = w.sum(1)
        ch = _Chunk(sl, t, delta, sigma, albedo, None, None, T, w, acc, None, cache)
        normals = None
        if with_normals:
            normals = np.tile(NORMAL_FALLBACK, (r * n_samples, 1))
            sel = (np.abs(x).max(-1) <= 1.0).reshape(-1) & (w.reshape(-1) >= normal_cutoff)
            if sel.any():
                probes = normal_offsets(x.reshape(-1, 3)[sel])
                sigp, _, pcache = field.forward(probes.reshape(-1, 3))
                nsel, g, gnorm = normals_from_probes(np.asarray(sigp).reshape(-1, N_PROBES))
                normals[sel] = nsel
                ch.sel, ch.probe_cache, ch.probe_g, ch.probe_norm = sel, pcache, g, gnorm
            normals = normals.reshape(r, n_samples, 3)
        color = shade(shading, albedo.reshape(-1, 3), None if normals is None else normals.reshape(-1, 3),
                      light).reshape(r, n_samples, 3)
        ch.normals, ch.color = normals, color
        out.rgb[sl] = np.einsum("rs,rsk->rk", w, color) + (1.0 - acc)[:, None] * BACKGROUND
        out.alpha[sl] = acc
        ch.depth = np.sum(w * t, axis=1) / np.maximum(acc, DEPTH_EPS)
        out.depth[sl] = ch.depth
        out.chunks.append(ch)
    return out


def render_ray(field, ray: Ray, n_samples: int = 64, shading: str = "albedo", light_dir=None, rng=None):
    """Render one ray; returns (rgb, alpha, depth)."""
    res = render_rays(field, ray.origin[None], ray.direction[None], ray.t_near, ray.t_far, n_samples,
                      shading, light_dir, rng)
    return res.rgb[0], float(res.alpha[0]), float(res.depth[0])


@dataclass
class ViewRender:
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    camera: Camera
    batch: RayBatchRender = dc_field(repr=False)

    def backward(self, d_rgb=None, d_mask=None, d_depth=None, grads=None):
        self.batch.backward(d_rgb, d_mask, d_depth, grads)


def render_view(field, camera: Camera, shading: str = "albedo", light_dir=None, n_samples: int = 32,
                rng=None, normal_cutoff: float = 0.0) -> ViewRender:
    rays = generate_rays(camera)
    o, d = rays.flat()
    res = render_rays(field, o, d, rays.t_near, rays.t_far, n_samples, shading, light_dir, rng, normal_cutoff)
    h, w = camera.shape
    return ViewRender(res.rgb.reshape(h, w, 3), res.alpha.reshape(h, w), res.depth.reshape(h, w), camera, res)


def _tangents(p: np.ndarray):
    hgt, wid = p.shape[:2]
    du = np.empty_like(p)
    dv = np.empty_like(p)
    du[:, 1:-1] = (p[:, 2:] - p[:, :-2]) * 0.5
    du[:, 0] = p[:, 1] - p[:, 0]
    du[:, -1] = p[:, -1] - p[:, -2]
    dv[1:-1] = (p[2:] - p[:-2]) * 0.5
    dv[0] = p[1] - p[0]
    dv[-1] = p[-1] - p[-2]
    return du, dv


def _tangents_backward(ddu, ddv):
    dp = np.zeros_like(ddu)
    dp[:, 2:] += 0.5 * ddu[:, 1:-1]
    dp[:, :-2] -= 0.5 * ddu[:, 1:-1]
    dp[:, 1] += ddu[:, 0]
    dp[:, 0] -= ddu[:, 0]
    dp[:, -1] += ddu[:, -1]
    dp[:, -2] -= ddu[:, -1]
    dp[2:] += 0.5 * ddv[1:-1]
    dp[:-2] -= 0.5 * ddv[1:-1]
    dp[1] += ddv[0]
    dp[0] -= ddv[0]
    dp[-1] += ddv[-1]
    dp[-2] -= ddv[-1]
    return dp


def depth_normal_map(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Camera-space unit normals (H, W, 3) from a ray-distance depth map; they face the camera."""
    if depth.shape[0] < 2 or depth.shape[1] < 2:
        raise ValueError("depth map must be at least 2x2")
    p = depth[..., None] * camera_space_directions(camera)
    du, dv = _tangents(p)
    m = np.cross(dv, du)
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    bad = norm[..., 0] < 1e-20
    n = m / np.where(bad[..., None], 1.0, norm)
    n[bad] = (0.0, 0.0, -1.0)
    return n


def depth_normal_map_backward(depth: np.ndarray, camera: Camera, d_normals: np.ndarray) -> np.ndarray:
    dirs = camera_space_directions(camera)
    p = depth[..., None] * dirs
    du, dv = _tangents(p)
    m = np.cross(dv, du)
    norm = np.linalg.norm(m, axis=-1, keepdims=True)
    bad = norm[..., 0] < 1e-20
    safe = np.where(bad[..., None], 1.0, norm)
    n = m / safe
    dm = (d_normals - n * np.sum(d_normals * n, axis=-1, keepdims=True)) / safe
    dm[bad] = 0.0
    ddv = np.cross(du, dm)
    ddu = np.cross(dm, dv)
    dp = _tangents_backward(ddu, ddv)
    return np.sum(dp * dirs, axis=-1)
