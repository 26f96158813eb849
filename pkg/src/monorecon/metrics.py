"""Image and geometry metrics."""

from __future__ import annotations

import math

import numpy as np

PSNR_CAP_DB = 99.0


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when they are identical.

    With a mask, only pixels where mask > 0.5 count (all channels).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        sel = np.asarray(mask) > 0.5
        if not sel.any():
            raise ValueError("empty mask")
        diff = diff[sel]
    mse = float(diff.mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def report_db(value: float) -> float:
    return min(value, PSNR_CAP_DB)


def mask_iou(pred, ref, threshold: float = 0.5) -> float:
    p = np.asarray(pred) > threshold
    r = np.asarray(ref) > threshold
    union = np.logical_or(p, r).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, r).sum() / union)


def depth_corr(d, d_ref, mask) -> float:
    """Pearson r over pixels with mask > 0.5; 0 when either side is constant."""
    sel = np.asarray(mask) > 0.5
    x = np.asarray(d_ref, dtype=np.float64)[sel]
    y = np.asarray(d, dtype=np.float64)[sel]
    if x.size < 2:
        return 0.0
    xc, yc = x - x.mean(), y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if den < 1e-300:
        return 0.0
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))
