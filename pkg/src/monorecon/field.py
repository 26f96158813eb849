"""Coarse-stage radiance field: hash-grid features + position -> 3-layer MLP.

Outputs density sigma = softplus(raw + blob(x)) and albedo = sigmoid(logits).
Points outside the [-1, 1]^3 box have zero density and white albedo.

Any object with `forward(x) -> (sigma, albedo, cache)` and
`backward(cache, dsigma, dalbedo, want_dx=False)` can be rendered;
`AnalyticField` wraps closed-form functions for tests and oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hashgrid import HashGrid
from .optim import ParamStore

BLOB_DENSITY = 5.0
BLOB_RADIUS = 0.2
# keeps empty space nearly transparent at init; the blob still gives sigma(0) ~ 1.3
DENSITY_BIAS = -4.0


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def blob(x: np.ndarray) -> np.ndarray:
    return BLOB_DENSITY * np.exp(-np.sum(x * x, axis=-1) / (2 * BLOB_RADIUS ** 2))


def inside_box(x: np.ndarray) -> np.ndarray:
    return np.all(np.abs(x) <= 1.0, axis=-1)


@dataclass
class FieldCache:
    inside: np.ndarray
    x: np.ndarray
    h0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    raw: np.ndarray
    albedo_in: np.ndarray


class RadianceField:
    def __init__(self, store: ParamStore | None = None, prefix: str = "field", levels: int = 8,
                 base_res: int = 16, finest_res: int = 256, log2_table: int = 16, n_features: int = 2,
                 hidden: int = 64, seed: int = 0, use_blob: bool = True, dtype=np.float64):
        self.store = ParamStore() if store is None else store
        self.prefix = prefix
        self.use_blob = use_blob
        # compute precision of the encoder and MLP; parameters and gradients stay float64
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.grid = HashGrid(self.store, f"{prefix}.table", levels, base_res, finest_res, log2_table,
                             n_features, rng=rng)
        d_in = self.grid.out_dim + 3
        dims = [d_in, hidden, hidden, 4]
        self.layer_names = []
        for i in range(3):
            wn, bn = f"{prefix}.w{i}", f"{prefix}.b{i}"
            if wn not in self.store:
                fan_in = dims[i]
                std = np.sqrt(2.0 / fan_in) if i < 2 else 0.1 / np.sqrt(fan_in)
                self.store.add(wn, rng.normal(0.0, std, size=(dims[i], dims[i + 1])))
                b = np.zeros(dims[i + 1])
                if i == 2:
                    b[0] = DENSITY_BIAS
                self.store.add(bn, b)
            self.layer_names.append((wn, bn))

    def param_names(self) -> list[str]:
        return [self.grid.name] + [n for pair in self.layer_names for n in pair]

    def _w(self, i):
        wn, bn = self.layer_names[i]
        dt = self.dtype
        return self.store.values[wn].astype(dt, copy=False), self.store.values[bn].astype(dt, copy=False)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        lead = x.shape[:-1]
        x = x.reshape(-1, 3)
        inside = inside_box(x)
        xi = np.ascontiguousarray(x[inside])
        h0 = np.concatenate([self.grid.encode(xi, self.dtype), xi.astype(self.dtype)], axis=1)
        w0, b0 = self._w(0)
        w1, b1 = self._w(1)
        w2, b2 = self._w(2)
        a1 = h0 @ w0
        a1 += b0
        np.maximum(a1, 0.0, out=a1)
        a2 = a1 @ w1
        a2 += b1
        np.maximum(a2, 0.0, out=a2)
        out = a2 @ w2
        out += b2
        out = out.astype(np.float64, copy=False)
        raw = out[:, 0] + blob(xi) if self.use_blob else out[:, 0].copy()
        sigma = np.zeros(x.shape[0])
        albedo = np.ones((x.shape[0], 3))
        sigma[inside] = softplus(raw)
        albedo[inside] = sigmoid(out[:, 1:4])
        if not (np.all(np.isfinite(sigma)) and np.all(np.isfinite(albedo))):
            raise FloatingPointError("radiance field produced non-finite output (diverged?)")
        cache = FieldCache(inside, xi, h0, a1, a2, raw, out[:, 1:4])
        return sigma.reshape(lead), albedo.reshape(lead + (3,)), cache

    def query(self, x):
        sigma, albedo, _ = self.forward(x)
        return sigma, albedo

    def backward(self, cache: FieldCache, dsigma, dalbedo=None, want_dx: bool = False, grads=None):
        """Accumulate parameter gradients; returns d/dx for all points when `want_dx`."""
        grads = self.store.grads if grads is None else grads
        inside = cache.inside
        n_all = inside.shape[0]
        if not inside.any():
            return np.zeros((n_all, 3)) if want_dx else None
        dsig = np.asarray(dsigma, dtype=np.float64).reshape(-1)[inside]
        dout = np.empty((cache.x.shape[0], 4))
        dout[:, 0] = dsig * sigmoid(cache.raw)
        if dalbedo is None:
            dout[:, 1:] = 0.0
        else:
            s = sigmoid(cache.albedo_in)
            dout[:, 1:] = np.asarray(dalbedo, dtype=np.float64).reshape(-1, 3)[inside] * s * (1 - s)
        dx_blob = dout[:, 0].copy() if want_dx and self.use_blob else None
        dout = dout.astype(self.dtype, copy=False)
        w0, _ = self._w(0)
        w1, _ = self._w(1)
        w2, _ = self._w(2)
        (n0w, n0b), (n1w, n1b), (n2w, n2b) = self.layer_names
        grads[n2w] += cache.a2.T @ dout
        grads[n2b] += dout.sum(0)
        d2 = dout @ w2.T
        d2 *= cache.a2 > 0
        grads[n1w] += cache.a1.T @ d2
        grads[n1b] += d2.sum(0)
        d1 = d2 @ w1.T
        d1 *= cache.a1 > 0
        grads[n0w] += cache.h0.T @ d1
        grads[n0b] += d1.sum(0)
        dh0 = d1 @ w0.T
        nf = self.grid.out_dim
        dx_in = self.grid.backward(cache.x, dh0[:, :nf], want_dx=want_dx, grads=grads)
        if not want_dx:
            return None
        dx_in = dx_in + dh0[:, nf:]
        if dx_blob is not None:
            dx_in += (dx_blob * -blob(cache.x) / BLOB_RADIUS ** 2)[:, None] * cache.x
        dx = np.zeros((n_all, 3))
        dx[inside] = dx_in
        return dx


class AnalyticField:
    """Closed-form density/albedo functions of position; carries no parameters."""

    def __init__(self, density, albedo=None):
        self.density = density
        self.albedo = albedo if albedo is not None else (lambda x: np.ones(x.shape[:-1] + (3,)))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.asarray(self.density(x), dtype=np.float64), np.asarray(self.albedo(x), dtype=np.float64), None

    def query(self, x):
        s, a, _ = self.forward(x)
        return s, a

    def backward(self, cache, dsigma, dalbedo=None, want_dx=False, grads=None):
        return None


def query_field(field, x):
    return field.query(x)


NORMAL_STEP = 1e-3
_OFFSETS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=np.float64)
N_PROBES = len(_OFFSETS)


def normal_offsets(x: np.ndarray, h: float = NORMAL_STEP) -> np.ndarray:
    """Six central-difference probe points per input point, shape (N, 6, 3)."""
    return x[:, None, :] + h * _OFFSETS[None]


def normals_from_probes(sig6: np.ndarray, h: float = NORMAL_STEP):
    """Unit normals -grad(sigma)/|grad| from probe densities (N, 6); also returns the raw gradient and norm."""
    g = np.stack([sig6[:, 0] - sig6[:, 1], sig6[:, 2] - sig6[:, 3], sig6[:, 4] - sig6[:, 5]], axis=1) / (2 * h)
    norm = np.linalg.norm(g, axis=1)
    flat = norm < 1e-8
    n = np.where(flat[:, None], 0.0, -g / np.where(flat, 1.0, norm)[:, None])
    n[flat] = (0.0, 0.0, 1.0)
    return n, g, norm


def normals_backward(dn: np.ndarray, g: np.ndarray, norm: np.ndarray, h: float = NORMAL_STEP) -> np.ndarray:
    """Map d(loss)/d(normal) back to d(loss)/d(probe density), shape (N, 6)."""
    flat = norm < 1e-8
    safe = np.where(flat, 1.0, norm)
    u = g / safe[:, None]
    # n = -u, du = (I - u u^T) dg / |g|
    dg = -(dn - u * np.sum(dn * u, axis=1, keepdims=True)) / safe[:, None]
    dg[flat] = 0.0
    dg /= 2 * h
    return np.stack([dg[:, 0], -dg[:, 0], dg[:, 1], -dg[:, 1], dg[:, 2], -dg[:, 2]], axis=1)


def field_normal(field, x, h: float = NORMAL_STEP) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-1]
    x = x.reshape(-1, 3)
    sig, _ = field.query(normal_offsets(x, h).reshape(-1, 3))
    n, _, _ = normals_from_probes(np.asarray(sig).reshape(-1, N_PROBES), h)
    return n.reshape(lead + (3,))
