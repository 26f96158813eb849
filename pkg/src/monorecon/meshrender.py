"""Ray-cast triangle-mesh renderer with frozen-visibility gradients.

Each pixel ray is intersected against the triangles whose projected bounding
box covers it (Moller-Trumbore); the nearest hit wins. In the backward pass
the hit triangle and its barycentrics are constants, so the hit point
p = sum_i b_i v_i is linear in the vertices and depth is t = (p - o) . d.
Silhouettes carry no gradient and the mask is not differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .geometry import Camera, generate_rays, project
from .tets import TriMesh
from .volume import BACKGROUND, shade, shade_backward, needs_normals

HIT_EPS = 1e-9
MAX_PAIRS = 1 << 21


def face_normals(vertices: np.ndarray, faces: np.ndarray):
    """Unit normals plus the unnormalized cross products and their lengths."""
    v = vertices[faces]
    m = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    ln = np.linalg.norm(m, axis=1)
    n = m / np.maximum(ln, 1e-300)[:, None]
    return n, m, ln


def _candidate_pairs(camera: Camera, vertices, faces):
    """Yield (face ids, pixel ids) chunks for every pixel inside each face's projected bbox."""
    h, w = camera.shape
    col, row, z = project(camera, vertices)
    fz = z[faces]
    ok = np.all(fz > 1e-6, axis=1)
    fc, fr = col[faces], row[faces]
    c0 = np.clip(np.floor(fc.min(1)).astype(np.int64), 0, w)
    c1 = np.clip(np.ceil(fc.max(1)).astype(np.int64) + 1, 0, w)
    r0 = np.clip(np.floor(fr.min(1)).astype(np.int64), 0, h)
    r1 = np.clip(np.ceil(fr.max(1)).astype(np.int64) + 1, 0, h)
    bw = np.where(ok, np.maximum(c1 - c0, 0), 0)
    bh = np.where(ok, np.maximum(r1 - r0, 0), 0)
    count = bw * bh
    ids = np.flatnonzero(count)
    if ids.size == 0:
        return
    csum = np.cumsum(count[ids])
    start = 0
    while start < ids.size:
        base = csum[start - 1] if start else 0
        stop = int(np.searchsorted(csum, base + MAX_PAIRS, side="right"))
        stop = max(stop, start + 1)
        sel = ids[start:stop]
        cnt = count[sel]
        f = np.repeat(sel, cnt)
        local = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        bws = bw[f]
        pc = c0[f] + local % bws
        pr = r0[f] + local // bws
        yield f, pr * w + pc
        start = stop


def intersect(origins, directions, vertices, faces, f, pix):
    """Moller-Trumbore for ray `pix` against face `f`; returns (hit, t, u, v)."""
    tri = vertices[faces[f]]
    o = origins[pix]
    d = directions[pix]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    good = np.abs(det) > 1e-14
    inv = 1.0 / np.where(good, det, 1.0)
    tvec = o - tri[:, 0]
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,ij->i", d, qvec) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = good & (u >= -HIT_EPS) & (v >= -HIT_EPS) & (u + v <= 1 + HIT_EPS) & (t > 1e-6)
    return hit, t, u, v


@dataclass
class MeshRender:
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    camera: Camera
    pix: np.ndarray = dc_field(repr=False)       # flat pixel ids with a hit
    face: np.ndarray = dc_field(repr=False)      # hit face per hit pixel
    bary: np.ndarray = dc_field(repr=False)      # (K, 3) frozen barycentrics
    directions: np.ndarray = dc_field(repr=False)
    mesh: TriMesh = dc_field(repr=False)
    field: object = dc_field(repr=False)
    cache: object = dc_field(repr=False)
    albedo: np.ndarray = dc_field(repr=False)
    normals: np.ndarray | None = dc_field(repr=False)
    shading: str = "albedo"
    light: np.ndarray | None = None

    def backward(self, d_rgb=None, d_mask=None, d_depth=None, grads=None) -> np.ndarray:
        """Accumulate color-field gradients; returns d(loss)/d(mesh vertices). `d_mask` is ignored."""
        nv = self.mesh.n_vertices
        dverts = np.zeros((nv, 3))
        k = self.pix.size
        if k == 0:
            return dverts
        h, w = self.camera.shape
        dp = np.zeros((k, 3))
        if d_depth is not None:
            dd = np.asarray(d_depth, dtype=np.float64).reshape(-1)[self.pix]
            dp += dd[:, None] * self.directions[self.pix]
        f = self.mesh.faces[self.face]
        if d_rgb is not None:
            dc = np.asarray(d_rgb, dtype=np.float64).reshape(-1, 3)[self.pix]
            dalb, dn = shade_backward(self.shading, dc, self.albedo, self.normals, self.light)
            if dalb is not None and self.cache is not None:
                dx = self.field.backward(self.cache, np.zeros(k), dalb, want_dx=True, grads=grads)
                if dx is not None:
                    dp += dx
            if dn is not None:
                _, m, ln = face_normals(self.mesh.vertices, self.mesh.faces[self.face])
                n = m / ln[:, None]
                dm = (dn - n * np.sum(dn * n, axis=1, keepdims=True)) / ln[:, None]
                tri = self.mesh.vertices[f]
                e1 = tri[:, 1] - tri[:, 0]
                e2 = tri[:, 2] - tri[:, 0]
                de1 = np.cross(e2, dm)
                de2 = np.cross(dm, e1)
                self._scatter(dverts, f[:, 1], de1)
                self._scatter(dverts, f[:, 2], de2)
                self._scatter(dverts, f[:, 0], -(de1 + de2))
        for c in range(3):
            self._scatter(dverts, f[:, c], self.bary[:, c:c + 1] * dp)
        return dverts

    @staticmethod
    def _scatter(out, idx, vals):
        n = out.shape[0]
        for c in range(3):
            out[:, c] += np.bincount(idx, weights=vals[:, c], minlength=n)


def render_mesh(mesh: TriMesh, color_field, camera: Camera, shading: str = "albedo", light=None) -> MeshRender:
    """Render rgb, mask and ray-distance depth of a mesh; `color_field` supplies albedo at hit points."""
    with_normals = needs_normals(shading)
    light = None if light is None else np.asarray(light, dtype=np.float64)
    if with_normals and shading != "normal" and light is None:
        raise ValueError(f"{shading} shading needs a light direction")
    h, w = camera.shape
    rays = generate_rays(camera)
    o, d = rays.flat()
    npx = h * w
    best_t = np.full(npx, np.inf)
    best_f = np.full(npx, -1, dtype=np.int64)
    best_uv = np.zeros((npx, 2))
    if mesh.n_faces:
        for f, pix in _candidate_pairs(camera, mesh.vertices, mesh.faces):
            hit, t, u, v = intersect(o, d, mesh.vertices, mesh.faces, f, pix)
            f, pix, t, u, v = f[hit], pix[hit], t[hit], u[hit], v[hit]
            if f.size == 0:
                continue
            # nearest hit per pixel, ties broken by the lower face id
            order = np.lexsort((f, t, pix))
            pix, f, t, u, v = pix[order], f[order], t[order], u[order], v[order]
            first = np.ones(pix.size, dtype=bool)
            first[1:] = pix[1:] != pix[:-1]
            pix, f, t, u, v = pix[first], f[first], t[first], u[first], v[first]
            better = (t < best_t[pix]) | ((t == best_t[pix]) & (f < best_f[pix]))
            pix, f, t, u, v = pix[better], f[better], t[better], u[better], v[better]
            best_t[pix] = t
            best_f[pix] = f
            best_uv[pix, 0] = u
            best_uv[pix, 1] = v
    pix = np.flatnonzero(best_f >= 0)
    face = best_f[pix]
    u, v = best_uv[pix, 0], best_uv[pix, 1]
    bary = np.stack([1 - u - v, u, v], axis=1)
    tri = mesh.vertices[mesh.faces[face]] if pix.size else np.zeros((0, 3, 3))
    p = np.einsum("kc,kcj->kj", bary, tri)
    rgb = np.full((npx, 3), BACKGROUND)
    mask = np.zeros(npx)
    depth = np.zeros(npx)
    normals = None
    cache = None
    albedo = np.zeros((0, 3))
    if pix.size:
        _, albedo, cache = color_field.forward(p)
        if with_normals:
            normals, _, _ = face_normals(mesh.vertices, mesh.faces[face])
        rgb[pix] = shade(shading, albedo, normals, light)
        mask[pix] = 1.0
        depth[pix] = np.einsum("kj,kj->k", p - o[pix], d[pix])
    return MeshRender(rgb.reshape(h, w, 3), mask.reshape(h, w), depth.reshape(h, w), camera, pix, face, bary, d,
                      mesh, color_field, cache, albedo, normals, shading, light)
