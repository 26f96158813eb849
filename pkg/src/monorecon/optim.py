"""Parameter storage, Adam, finite-difference gradient checks and checkpoints.

Nothing here differentiates anything: every differentiable operation in the
package writes its own analytic gradient into `ParamStore.grads`.

Checkpoint layout (all integers little-endian)::

    bytes 0..7    magic b"MRCKPT01"
    bytes 8..15   uint64 manifest length M
    next M bytes  UTF-8 manifest, one line per array: name<TAB>shape<TAB>offset<TAB>count
                  (shape is comma-separated, empty for scalars; offset is in bytes
                  from the start of the data block)
    padding       zeros up to the next multiple of 8
    data block    float64 little-endian arrays, back to back
"""

from __future__ import annotations

import os
import struct
from typing import Callable, Iterable

import numpy as np

MAGIC = b"MRCKPT01"


class ParamStore:
    """Named float64 arrays with gradients and Adam moments."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise KeyError(f"parameter {name!r} already exists")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def size(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for n in self.values:
            out.values[n] = self.values[n].copy()
            out.grads[n] = self.grads[n].copy()
            out.m[n] = self.m[n].copy()
            out.v[n] = self.v[n].copy()
        out.step = self.step
        return out

    def merge_grads(self, buffers: Iterable[dict[str, np.ndarray]]) -> None:
        """Sum per-worker gradient buffers into the store, in the order given."""
        for buf in buffers:
            for n, g in buf.items():
                self.grads[n] += g


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, names: Iterable[str] | None = None) -> None:
    for n, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {n!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for n in (store.values if names is None else names):
        g = store.grads[n]
        m, v = store.m[n], store.v[n]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.values[n] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def finite_diff_check(loss_fn: Callable[[ParamStore], float], store: ParamStore, h: float = 1e-5,
                      subset_size: int = 32, rng: np.random.Generator | None = None,
                      names: Iterable[str] | None = None, active_only: bool = False,
                      return_details: bool = False):
    """Compare analytic gradients with central differences on a random parameter subset.

    `loss_fn(store)` must return the scalar loss and accumulate its analytic
    gradient into `store.grads`. With `active_only`, only entries with a nonzero
    analytic gradient are sampled (hash tables are mostly untouched).
    Returns the max of |a - n| / max(|a|, |n|, 1e-8).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    names = list(store.values) if names is None else list(names)
    store.zero_grad()
    loss_fn(store)
    analytic = {n: store.grads[n].copy() for n in names}

    pool = []
    for n in names:
        flat = analytic[n].ravel()
        idx = np.flatnonzero(flat) if active_only else np.arange(flat.size)
        pool.extend((n, int(i)) for i in idx)
    if not pool:
        return (0.0, []) if return_details else 0.0
    pick = rng.choice(len(pool), size=min(subset_size, len(pool)), replace=False)

    worst = 0.0
    details = []
    for k in pick:
        n, i = pool[k]
        flat = store.values[n].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn(store)
        flat[i] = orig - h
        fm = loss_fn(store)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = analytic[n].reshape(-1)[i]
        err = abs(a - num) / max(abs(a), abs(num), 1e-8)
        details.append((n, i, a, num, err))
        worst = max(worst, err)
    store.zero_grad()
    return (worst, details) if return_details else worst


def _manifest_entries(store: ParamStore, extra: dict[str, np.ndarray] | None):
    arrays = {}
    for n in store.values:
        arrays[f"value/{n}"] = store.values[n]
        arrays[f"adam_m/{n}"] = store.m[n]
        arrays[f"adam_v/{n}"] = store.v[n]
    arrays["meta/step"] = np.array(float(store.step))
    for n, a in (extra or {}).items():
        arrays[f"extra/{n}"] = np.asarray(a, dtype=np.float64)
    return arrays


def save_checkpoint(path, store: ParamStore, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write values, Adam moments, the step counter and optional extra arrays."""
    arrays = _manifest_entries(store, extra)
    lines, offset = [], 0
    for n, a in arrays.items():
        if any(c in n for c in "\t\n"):
            raise ValueError(f"invalid array name {n!r}")
        shape = ",".join(str(s) for s in a.shape)
        lines.append(f"{n}\t{shape}\t{offset}\t{a.size}")
        offset += 8 * a.size
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(manifest)) + manifest
    head += b"\0" * (-len(head) % 8)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(head)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = raw[16:16 + mlen].decode("utf-8")
    start = 16 + mlen
    start += -start % 8
    out = {}
    for line in manifest.splitlines():
        if not line:
            continue
        name, shape, offset, count = line.split("\t")
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        offset, count = int(offset), int(count)
        lo = start + offset
        if lo + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated array {name!r}")
        out[name] = np.frombuffer(raw[lo:lo + 8 * count], dtype="<f8").astype(np.float64).reshape(shape)
    return out


def load_checkpoint(path, store: ParamStore | None = None) -> tuple[ParamStore, dict[str, np.ndarray]]:
    """Restore a store (creating it if needed); returns it plus any extra arrays."""
    arrays = read_checkpoint(path)
    store = ParamStore() if store is None else store
    extra = {}
    for key, a in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "value":
            if name in store.values:
                if store.values[name].shape != a.shape:
                    raise ValueError(f"shape mismatch for {name!r}: {store.values[name].shape} vs {a.shape}")
                store.values[name][...] = a
            else:
                store.add(name, a)
        elif kind == "extra":
            extra[name] = a
    for key, a in arrays.items():
        kind, _, name = key.partition("/")
        if kind == "adam_m":
            store.m[name][...] = a
        elif kind == "adam_v":
            store.v[name][...] = a
    store.step = int(arrays["meta/step"])
    store.zero_grad()
    return store, extra
