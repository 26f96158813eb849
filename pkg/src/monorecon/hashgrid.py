"""Multi-resolution hash-grid encoding.

Each level stores a table of `2**log2_table` feature vectors. A level with
`res` vertices per axis spans [-1, 1]^3; if `res**3` fits in the table the
vertices are indexed densely (row-major, x fastest), otherwise through the
usual XOR spatial hash. Features of the 8 cell corners are blended
trilinearly, so gradients touch exactly 8 entries per level.
"""

from __future__ import annotations

import math

import numba
import numpy as np

PRIMES = (1, 2654435761, 805459861)


def level_resolutions(levels: int, base: int, finest: int) -> np.ndarray:
    if levels == 1:
        return np.array([base], dtype=np.int64)
    growth = math.exp((math.log(finest) - math.log(base)) / (levels - 1))
    res = [int(math.floor(base * growth ** l + 1e-6)) for l in range(levels)]
    res[-1] = finest
    return np.array(res, dtype=np.int64)


@numba.njit(cache=True, inline="always")
def _corner_index(ix, iy, iz, res, dense, mask):
    if dense:
        return ix + res * (iy + res * iz)
    h = np.uint64(ix) ^ (np.uint64(iy) * np.uint64(2654435761)) ^ (np.uint64(iz) * np.uint64(805459861))
    return np.int64(h & np.uint64(mask))


@numba.njit(cache=True, inline="always")
def _cell(xk, res):
    p = (min(max(xk, -1.0), 1.0) + 1.0) * 0.5 * (res - 1)
    i = int(math.floor(p))
    if i > res - 2:
        i = res - 2
    if i < 0:
        i = 0
    return i, p - i


@numba.njit(cache=True)
def _encode_fwd(x, table, res, dense, out):
    n_pts = x.shape[0]
    n_lev, tsize, n_feat = table.shape
    mask = tsize - 1
    for n in range(n_pts):
        for l in range(n_lev):
            r = res[l]
            i0, f0 = _cell(x[n, 0], r)
            i1, f1 = _cell(x[n, 1], r)
            i2, f2 = _cell(x[n, 2], r)
            for c in range(8):
                o0 = c & 1
                o1 = (c >> 1) & 1
                o2 = (c >> 2) & 1
                w = (f0 if o0 else 1.0 - f0) * (f1 if o1 else 1.0 - f1) * (f2 if o2 else 1.0 - f2)
                idx = _corner_index(i0 + o0, i1 + o1, i2 + o2, r, dense[l], mask)
                for k in range(n_feat):
                    out[n, l * n_feat + k] += w * table[l, idx, k]


@numba.njit(cache=True)
def _encode_bwd(x, dout, table, res, dense, grad_table, dx, want_dx):
    n_pts = x.shape[0]
    n_lev, tsize, n_feat = table.shape
    mask = tsize - 1
    for n in range(n_pts):
        for l in range(n_lev):
            r = res[l]
            i0, f0 = _cell(x[n, 0], r)
            i1, f1 = _cell(x[n, 1], r)
            i2, f2 = _cell(x[n, 2], r)
            scale = 0.5 * (r - 1)
            for c in range(8):
                o0 = c & 1
                o1 = (c >> 1) & 1
                o2 = (c >> 2) & 1
                w0 = f0 if o0 else 1.0 - f0
                w1 = f1 if o1 else 1.0 - f1
                w2 = f2 if o2 else 1.0 - f2
                w = w0 * w1 * w2
                idx = _corner_index(i0 + o0, i1 + o1, i2 + o2, r, dense[l], mask)
                dot = 0.0
                for k in range(n_feat):
                    g = dout[n, l * n_feat + k]
                    grad_table[l, idx, k] += w * g
                    dot += g * table[l, idx, k]
                if want_dx:
                    s0 = 1.0 if o0 else -1.0
                    s1 = 1.0 if o1 else -1.0
                    s2 = 1.0 if o2 else -1.0
                    dx[n, 0] += dot * s0 * w1 * w2 * scale
                    dx[n, 1] += dot * w0 * s1 * w2 * scale
                    dx[n, 2] += dot * w0 * w1 * s2 * scale


class HashGrid:
    """Hash-grid encoder whose table lives in a ParamStore under `name`."""

    def __init__(self, store, name: str = "grid.table", levels: int = 8, base_res: int = 16,
                 finest_res: int = 256, log2_table: int = 16, n_features: int = 2,
                 rng: np.random.Generator | None = None, init_scale: float = 1e-4):
        self.store = store
        self.name = name
        self.res = level_resolutions(levels, base_res, finest_res)
        self.table_size = 2 ** log2_table
        self.dense = self.res ** 3 <= self.table_size
        self.n_features = n_features
        if name not in store:
            rng = np.random.default_rng(0) if rng is None else rng
            store.add(name, rng.uniform(-init_scale, init_scale, size=(levels, self.table_size, n_features)))

    @property
    def levels(self) -> int:
        return len(self.res)

    @property
    def out_dim(self) -> int:
        return self.levels * self.n_features

    def encode(self, x: np.ndarray, dtype=np.float64) -> np.ndarray:
        """Features in `dtype`; positions are always located in float64."""
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
        out = np.zeros((x.shape[0], self.out_dim), dtype=dtype)
        _encode_fwd(x, self.store.values[self.name].astype(dtype, copy=False), self.res, self.dense, out)
        return out

    def backward(self, x: np.ndarray, dout: np.ndarray, want_dx: bool = False, grads=None):
        """Accumulate d(loss)/d(table); optionally return d(loss)/dx."""
        x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 3)
        dout = np.ascontiguousarray(dout)
        if dout.dtype != np.float32:
            dout = dout.astype(np.float64, copy=False)
        grad = (self.store.grads if grads is None else grads)[self.name]
        dx = np.zeros_like(x)
        table = self.store.values[self.name].astype(dout.dtype, copy=False)
        _encode_bwd(x, dout, table, self.res, self.dense, grad, dx, want_dx)
        return dx if want_dx else None

    def corner_indices(self, x: np.ndarray, level: int) -> np.ndarray:
        """Table rows touched by each point at one level, shape (N, 8). Used by tests."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        r = int(self.res[level])
        p = (np.clip(x, -1, 1) + 1) * 0.5 * (r - 1)
        i = np.clip(np.floor(p).astype(np.int64), 0, r - 2)
        out = np.empty((x.shape[0], 8), dtype=np.int64)
        for c in range(8):
            o = np.array([c & 1, (c >> 1) & 1, (c >> 2) & 1])
            ii = (i + o).astype(np.uint64)
            if self.dense[level]:
                out[:, c] = (ii[:, 0] + r * (ii[:, 1] + r * ii[:, 2])).astype(np.int64)
            else:
                h = ii[:, 0] ^ (ii[:, 1] * np.uint64(PRIMES[1])) ^ (ii[:, 2] * np.uint64(PRIMES[2]))
                out[:, c] = (h & np.uint64(self.table_size - 1)).astype(np.int64)
        return out
