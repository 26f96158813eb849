"""PNG and PFM buffers.

Image buffers are plain float64 arrays: (H, W) for masks and depth, (H, W, 3)
for RGB. PNG values map linearly to [0, 1] (no sRGB transfer curve). PFM holds
32-bit little-endian floats, so the round trip is bit-exact for any value that
is representable in float32.
"""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image


class ImageIOError(OSError):
    pass


class ImageFormatError(ValueError):
    pass


def _channels(buf: np.ndarray) -> int:
    return 1 if buf.ndim == 2 else buf.shape[2]


def check_buffer(buf, kind: str = "rgb") -> np.ndarray:
    """Validate a buffer of the given kind ('rgb', 'mask' or 'depth') and return it as float64."""
    buf = np.asarray(buf, dtype=np.float64)
    if kind == "rgb":
        if buf.ndim != 3 or buf.shape[2] != 3:
            raise ImageFormatError(f"expected (H, W, 3) RGB buffer, got {buf.shape}")
        lo, hi = 0.0, 1.0
    elif kind == "mask":
        if buf.ndim != 2:
            raise ImageFormatError(f"expected (H, W) mask, got {buf.shape}")
        lo, hi = 0.0, 1.0
    elif kind == "depth":
        if buf.ndim != 2:
            raise ImageFormatError(f"expected (H, W) depth map, got {buf.shape}")
        lo, hi = 0.0, np.inf
    else:
        raise ValueError(f"unknown buffer kind {kind!r}")
    if buf.size and (buf.min() < lo or buf.max() > hi):
        raise ImageFormatError(f"{kind} values outside [{lo}, {hi}]")
    return buf


def save_image(path, buf) -> None:
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    buf = np.asarray(buf, dtype=np.float64)
    if buf.ndim == 3 and buf.shape[2] == 1:
        buf = buf[..., 0]
    if ext == ".png":
        if _channels(buf) not in (1, 3):
            raise ImageFormatError(f"PNG needs 1 or 3 channels, got shape {buf.shape}")
        q = np.round(np.clip(buf, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(q, mode="L" if q.ndim == 2 else "RGB").save(path)
    elif ext == ".pfm":
        write_pfm(path, buf)
    else:
        raise ImageFormatError(f"unsupported image extension {ext!r}")


def load_image(path, channels: int | None = None) -> np.ndarray:
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if not os.path.exists(path):
        raise ImageIOError(f"no such file: {path}")
    if ext == ".png":
        try:
            with Image.open(path) as im:
                im.load()
                if im.mode in ("L", "I", "I;16", "1"):
                    arr = np.asarray(im.convert("L"))
                elif im.mode in ("RGB", "RGBA", "P"):
                    arr = np.asarray(im.convert("RGB"))
                else:
                    raise ImageFormatError(f"unsupported PNG mode {im.mode} in {path}")
        except ImageFormatError:
            raise
        except Exception as exc:
            raise ImageIOError(f"cannot read PNG {path}: {exc}") from exc
        out = arr.astype(np.float64) / 255.0
    elif ext == ".pfm":
        out = read_pfm(path)
    else:
        raise ImageFormatError(f"unsupported image extension {ext!r}")
    if channels is not None and _channels(out) != channels:
        raise ImageFormatError(f"{path}: expected {channels} channel(s), found {_channels(out)}")
    return out


def write_pfm(path, buf) -> None:
    buf = np.asarray(buf)
    if buf.ndim == 2:
        tag, h, w = b"Pf", buf.shape[0], buf.shape[1]
    elif buf.ndim == 3 and buf.shape[2] == 3:
        tag, h, w = b"PF", buf.shape[0], buf.shape[1]
    else:
        raise ImageFormatError(f"PFM needs (H, W) or (H, W, 3), got {buf.shape}")
    data = np.ascontiguousarray(buf[::-1], dtype="<f4")  # PFM stores the bottom row first
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(data.tobytes())


_PFM_HEADER = re.compile(rb"^(P[fF])\s+(\d+)\s+(\d+)\s+(-?[0-9.eE+-]+)\s")


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = _PFM_HEADER.match(raw)
    if m is None:
        raise ImageIOError(f"{path}: malformed PFM header")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    ch = 1 if tag == b"Pf" else 3
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    n = w * h * ch
    if len(body) < 4 * n:
        raise ImageIOError(f"{path}: truncated PFM payload ({len(body)} of {4 * n} bytes)")
    arr = np.frombuffer(body[: 4 * n], dtype=dtype).astype(np.float64)
    arr = arr.reshape((h, w) if ch == 1 else (h, w, 3))
    return arr[::-1].copy()
