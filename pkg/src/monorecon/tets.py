"""Deformable tetrahedral grid, marching tetrahedra and triangle meshes.

Sign convention: s > 0 is inside (s == 0 counts as inside). Each cube of the
lattice is split into the 6 Kuhn tetrahedra that share its main diagonal, so
faces match across neighbouring cubes. A surface vertex on edge (i, j),
i < j, sits at

    p = v'_i + lam (v'_j - v'_i),   lam = s_i / (s_i - s_j),   v' = v + clip(dv)

which we differentiate directly for the backward pass.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np

# Worst-case per-axis offsets flatten a Kuhn tet at h/6; stay below that.
DEFAULT_DEFORM_CLAMP = 0.15


@dataclass
class TetGrid:
    vertices: np.ndarray
    tets: np.ndarray
    sdf: np.ndarray
    deform: np.ndarray
    resolution: int
    cell: float
    deform_clamp: float = DEFAULT_DEFORM_CLAMP

    @property
    def max_offset(self) -> float:
        return self.deform_clamp * self.cell

    def effective_deform(self) -> np.ndarray:
        b = self.max_offset
        return np.clip(self.deform, -b, b)

    def deformed_vertices(self) -> np.ndarray:
        return self.vertices + self.effective_deform()

    def signed_volumes(self) -> np.ndarray:
        return tet_volumes(self.deformed_vertices(), self.tets)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    edges: np.ndarray | None = None     # (M, 2) lattice edge each vertex lies on
    lam: np.ndarray | None = None       # (M,) position parameter along that edge
    face_tets: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def tet_volumes(verts: np.ndarray, tets: np.ndarray) -> np.ndarray:
    v = verts[tets]
    return np.einsum("ij,ij->i", v[:, 1] - v[:, 0], np.cross(v[:, 2] - v[:, 0], v[:, 3] - v[:, 0])) / 6.0


def _kuhn_tets() -> np.ndarray:
    """Corner offsets (6, 4, 3) of the positively oriented Kuhn tets of a unit cube."""
    out = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, dtype=np.int64)]
        for ax in perm:
            nxt = path[-1].copy()
            nxt[ax] = 1
            path.append(nxt)
        p = np.array(path)
        if np.linalg.det((p[1:] - p[0]).astype(float)) < 0:
            p[[2, 3]] = p[[3, 2]]
        out.append(p)
    return np.array(out)


def build_grid(resolution: int, deform_clamp: float = DEFAULT_DEFORM_CLAMP) -> TetGrid:
    """Lattice with `resolution` vertices per axis over [-1, 1]^3."""
    n = int(resolution)
    if n < 2:
        raise ValueError("grid resolution must be at least 2")
    axis = np.linspace(-1.0, 1.0, n)
    k, j, i = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    verts = np.stack([axis[i.ravel()], axis[j.ravel()], axis[k.ravel()]], axis=1)
    c = np.arange(n - 1)
    ck, cj, ci = np.meshgrid(c, c, c, indexing="ij")
    base = np.stack([ci.ravel(), cj.ravel(), ck.ravel()], axis=1)
    kuhn = _kuhn_tets()
    corners = base[:, None, None, :] + kuhn[None]          # (cubes, 6, 4, 3)
    idx = corners[..., 0] + n * (corners[..., 1] + n * corners[..., 2])
    tets = idx.reshape(-1, 4).astype(np.int64)
    nv = len(verts)
    return TetGrid(verts, tets, np.zeros(nv), np.zeros((nv, 3)), n, 2.0 / (n - 1), deform_clamp)


def init_sdf_from_density(field, grid: TetGrid, sigma_thr: float = 10.0) -> None:
    sigma, _ = field.query(grid.vertices)
    grid.sdf[...] = np.asarray(sigma, dtype=np.float64) - sigma_thr
    grid.deform[...] = 0.0


_TET_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])


def _case_table():
    """For each 4-bit inside code: list of triangles as (local a, local b) edge triples."""
    table = {}
    for code in range(16):
        ins = [k for k in range(4) if code >> k & 1]
        out = [k for k in range(4) if not code >> k & 1]
        if len(ins) in (0, 4):
            tris = []
        elif len(ins) == 1:
            a = ins[0]
            tris = [[(a, out[0]), (a, out[1]), (a, out[2])]]
        elif len(ins) == 3:
            d = out[0]
            tris = [[(ins[0], d), (ins[1], d), (ins[2], d)]]
        else:
            a, b = ins
            c, d = out
            tris = [[(a, c), (a, d), (b, d)], [(a, c), (b, d), (b, c)]]
        table[code] = tris
    return table


_CASES = _case_table()


def _safe_sdf(s: np.ndarray) -> np.ndarray:
    return np.where(s == 0.0, 1e-12, s)


def marching_tets(grid: TetGrid) -> TriMesh:
    s = _safe_sdf(grid.sdf)
    inside = s > 0
    tets = grid.tets
    code = (inside[tets] * (1 << np.arange(4))).sum(1)
    tri_edges, tri_tet = [], []
    for c, tris in _CASES.items():
        if not tris:
            continue
        sel = np.flatnonzero(code == c)
        if sel.size == 0:
            continue
        tv = tets[sel]
        for tri in tris:
            e = np.stack([np.stack([tv[:, a], tv[:, b]], axis=1) for a, b in tri], axis=1)  # (k, 3, 2)
            tri_edges.append(e)
            tri_tet.append(sel)
    if not tri_edges:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 2), dtype=np.int64),
                       np.zeros(0), np.zeros(0, dtype=np.int64))
    e = np.concatenate(tri_edges)
    ftet = np.concatenate(tri_tet)
    order = np.argsort(ftet, kind="stable")
    e, ftet = e[order], ftet[order]
    lo = np.minimum(e[..., 0], e[..., 1])
    hi = np.maximum(e[..., 0], e[..., 1])
    nv = len(grid.vertices)
    keys, inv = np.unique((lo * nv + hi).ravel(), return_inverse=True)
    faces = inv.reshape(-1, 3).astype(np.int64)
    edges = np.stack([keys // nv, keys % nv], axis=1)
    si, sj = s[edges[:, 0]], s[edges[:, 1]]
    lam = si / (si - sj)
    vd = grid.deformed_vertices()
    verts = vd[edges[:, 0]] + lam[:, None] * (vd[edges[:, 1]] - vd[edges[:, 0]])

    # wind every triangle so its normal points from the inside corners to the outside ones
    tv = tets[ftet]
    ins = inside[tv].astype(np.float64)
    pos = vd[tv]
    c_in = (ins[..., None] * pos).sum(1) / ins.sum(1, keepdims=True)
    c_out = ((1 - ins)[..., None] * pos).sum(1) / (1 - ins).sum(1, keepdims=True)
    p = verts[faces]
    nrm = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    flip = np.einsum("ij,ij->i", nrm, c_out - c_in) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriMesh(verts, faces, edges, lam, ftet)


def marching_tets_backward(grid: TetGrid, mesh: TriMesh, d_vertices: np.ndarray):
    """Gradients (d_sdf, d_deform) of a loss given its gradient wrt the mesh vertex positions."""
    nv = len(grid.vertices)
    d_sdf = np.zeros(nv)
    d_def = np.zeros((nv, 3))
    if mesh.n_vertices == 0:
        return d_sdf, d_def
    s = _safe_sdf(grid.sdf)
    i, j = mesh.edges[:, 0], mesh.edges[:, 1]
    si, sj = s[i], s[j]
    vd = grid.deformed_vertices()
    lam = mesh.lam
    dlam = np.einsum("ij,ij->i", d_vertices, vd[j] - vd[i])
    den = (si - sj) ** 2
    d_sdf += np.bincount(i, weights=dlam * -sj / den, minlength=nv)
    d_sdf += np.bincount(j, weights=dlam * si / den, minlength=nv)
    dvi = (1 - lam)[:, None] * d_vertices
    dvj = lam[:, None] * d_vertices
    for k in range(3):
        d_def[:, k] += np.bincount(i, weights=dvi[:, k], minlength=nv)
        d_def[:, k] += np.bincount(j, weights=dvj[:, k], minlength=nv)
    d_def *= np.abs(grid.deform) < grid.max_offset
    return d_sdf, d_def


def mesh_edge_counts(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and how many faces use each."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def is_watertight(mesh: TriMesh) -> bool:
    if mesh.n_faces == 0:
        return False
    _, counts = mesh_edge_counts(mesh.faces)
    return bool(np.all(counts == 2))


def is_consistently_oriented(mesh: TriMesh) -> bool:
    """Every directed edge appears at most once, i.e. neighbours agree on winding."""
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 1))


def euler_characteristic(mesh: TriMesh) -> int:
    used = np.unique(mesh.faces)
    uniq, _ = mesh_edge_counts(mesh.faces)
    return int(len(used) - len(uniq) + mesh.n_faces)


def signed_mesh_volume(mesh: TriMesh) -> float:
    """Positive for a closed mesh whose normals point outward."""
    v = mesh.vertices[mesh.faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


class ObjParseError(ValueError):
    pass


def export_obj(mesh: TriMesh, path) -> None:
    """ASCII OBJ, 1-based faces; 17 significant digits so float64 coordinates round-trip exactly."""
    with open(path, "w", encoding="utf-8") as f:
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.faces:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def import_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(p) for p in parts[1:4]])
                elif tag == "f":
                    if len(parts) != 4:
                        raise ValueError("only triangular faces are supported")
                    idx = []
                    for p in parts[1:]:
                        k = int(p.split("/")[0])
                        k = k - 1 if k > 0 else len(verts) + k
                        if not 0 <= k < len(verts):
                            raise ValueError(f"face index {p} out of range")
                        idx.append(k)
                    faces.append(idx)
                elif tag in ("vn", "vt", "o", "g", "s", "usemtl", "mtllib"):
                    continue
                else:
                    raise ValueError(f"unknown record {tag!r}")
            except ValueError as exc:
                raise ObjParseError(f"{os.fspath(path)}:{lineno}: {exc}") from None
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
