"""Reference-view losses of the coarse stage and their composition.

Every loss returns its value together with gradients with respect to the
rendered buffers it consumes, so the caller can push them through a renderer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_THRESHOLD = 0.5
BLUR_KERNEL = 9
BLUR_SIGMA = 3.0


@dataclass(frozen=True)
class LossWeights:
    lambda_rgb: float = 5.0
    lambda_mask: float = 0.5
    lambda_d: float = 0.001
    lambda_n: float = 0.5

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be non-negative")


def recon_loss(rgb, mask, ref_rgb, ref_mask, w: LossWeights = LossWeights()):
    """Masked photometric MSE plus mask MSE. Returns (loss, d_rgb, d_mask)."""
    if rgb.shape != ref_rgb.shape or mask.shape != ref_mask.shape:
        raise ValueError("rendered and reference buffers differ in shape")
    m = ref_mask[..., None]
    r = m * (ref_rgb - rgb)
    rm = ref_mask - mask
    loss = w.lambda_rgb * np.mean(r * r) + w.lambda_mask * np.mean(rm * rm)
    d_rgb = -2.0 * w.lambda_rgb * m * r / r.size
    d_mask = -2.0 * w.lambda_mask * rm / rm.size
    return float(loss), d_rgb, d_mask


def depth_pearson_loss(depth, ref_depth, mask):
    """Half of (1 - Pearson r) between depth and ref_depth over pixels with mask > 0.5.

    Degenerate input (fewer than 2 pixels, or a constant map) gives 0 and a zero gradient.
    """
    sel = mask > MASK_THRESHOLD
    grad = np.zeros_like(depth, dtype=np.float64)
    if sel.sum() < 2:
        return 0.0, grad
    x = ref_depth[sel].astype(np.float64)
    y = depth[sel].astype(np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = np.sum(xc * xc)
    syy = np.sum(yc * yc)
    n = x.size
    if np.sqrt(syy / n) < 1e-12 or np.sqrt(sxx / n) < 1e-12:
        return 0.0, grad
    r = np.sum(xc * yc) / np.sqrt(sxx * syy)
    r = min(max(r, -1.0), 1.0)
    dr = xc / np.sqrt(sxx * syy) - r * yc / syy
    grad[sel] = -0.5 * dr
    return float(0.5 * (1.0 - r)), grad


def gaussian_kernel1d(size: int = BLUR_KERNEL, sigma: float = BLUR_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, size: int = BLUR_KERNEL, sigma: float = BLUR_SIGMA) -> np.ndarray:
    """Separable blur with mirror padding (edge pixel not repeated); works on (H, W) or (H, W, C)."""
    k = gaussian_kernel1d(size, sigma)
    r = size // 2
    pad = [(r, r), (r, r)] + [(0, 0)] * (img.ndim - 2)
    p = np.pad(img, pad, mode="reflect")
    h, w = img.shape[:2]
    tmp = sum(k[i] * p[i:i + h] for i in range(size))
    return sum(k[i] * tmp[:, i:i + w] for i in range(size))


def normal_smoothness_loss(normals, mask, blurred=None):
    """Mean over masked pixels of |n - blur(n)|, with the blurred map held constant.

    Returns (loss, d_normals). Pass `blurred` to reuse a frozen blur.
    """
    sel = mask > MASK_THRESHOLD
    grad = np.zeros_like(normals, dtype=np.float64)
    k = int(sel.sum())
    if k == 0:
        return 0.0, grad
    target = gaussian_blur(normals) if blurred is None else blurred
    res = normals - target
    dist = np.linalg.norm(res, axis=-1)
    loss = dist[sel].sum() / k
    nz = sel & (dist > 1e-12)
    grad[nz] = res[nz] / dist[nz][:, None] / k
    return float(loss), grad


@dataclass
class CoarseLoss:
    total: float
    recon: float
    depth: float
    normal: float
    guidance_magnitude: float
    d_rgb: np.ndarray
    d_mask: np.ndarray
    d_depth: np.ndarray
    d_normals: np.ndarray
    d_novel_rgb: np.ndarray | None


def total_coarse_loss(rgb, mask, depth, normals, ref_rgb, ref_mask, ref_depth, guidance_grad=None,
                      w: LossWeights = LossWeights(), depth_mask=None, normal_mask=None) -> CoarseLoss:
    """Reconstruction + lambda_d * depth + lambda_n * normal smoothness.

    The guidance term has no scalar value; its gradient buffer is passed through
    unchanged for the novel view and its mean magnitude is reported for logging.
    `depth_mask` and `normal_mask` restrict those terms (both default to the reference mask).
    """
    rec, d_rgb, d_mask = recon_loss(rgb, mask, ref_rgb, ref_mask, w)
    ld, d_depth = (0.0, np.zeros_like(depth))
    if w.lambda_d > 0:
        ld, d_depth = depth_pearson_loss(depth, ref_depth, ref_mask if depth_mask is None else depth_mask)
        d_depth = w.lambda_d * d_depth
    ln, d_n = (0.0, np.zeros_like(normals))
    if w.lambda_n > 0:
        ln, d_n = normal_smoothness_loss(normals, ref_mask if normal_mask is None else normal_mask)
        d_n = w.lambda_n * d_n
    mag = 0.0 if guidance_grad is None else float(np.mean(np.abs(guidance_grad)))
    total = rec + w.lambda_d * ld + w.lambda_n * ln
    return CoarseLoss(total, rec, ld, ln, mag, d_rgb, d_mask, d_depth, d_n, guidance_grad)
