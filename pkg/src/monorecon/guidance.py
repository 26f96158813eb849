"""Score-distillation guidance with pluggable noise predictors.

A provider implements ``predict_noise(z_t, t, condition)``. Providers that can
also predict without the condition expose ``predict_noise_uncond`` and are
combined with classifier-free guidance. The two mocks below are exact
denoisers for a point-mass data distribution, which makes the SDS residual
available in closed form:

    w(t) (eps_hat - eps) = sqrt(abar_t) sqrt(1 - abar_t) (image - target).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, apply_relative_pose, relative_pose


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_min_frac: float = 0.02
    t_max_frac: float = 0.98

    def __post_init__(self):
        if not 0.0 <= self.t_min_frac <= self.t_max_frac <= 1.0:
            raise ValueError("need 0 <= t_min_frac <= t_max_frac <= 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        # index 0 is unused so that alpha_bar[t] matches 1-based steps
        object.__setattr__(self, "_abar", np.concatenate([[1.0], np.cumprod(1.0 - betas)]))

    def alpha_bar(self, t: int) -> float:
        self._check(t)
        return float(self._abar[t])

    def weight(self, t: int) -> float:
        return 1.0 - self.alpha_bar(t)

    def t_range(self) -> tuple[int, int]:
        lo = math.ceil(self.t_min_frac * self.T - 1e-9)
        hi = math.floor(self.t_max_frac * self.T + 1e-9)
        return max(lo, 1), min(hi, self.T)

    def _check(self, t):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def sample_timestep(schedule: NoiseSchedule, rng: np.random.Generator) -> int:
    lo, hi = schedule.t_range()
    return int(rng.integers(lo, hi + 1))


def add_noise(x: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule | None = None) -> np.ndarray:
    schedule = schedule or NoiseSchedule()
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, s: float) -> np.ndarray:
    if np.shape(eps_cond) != np.shape(eps_uncond):
        raise ValueError("conditional and unconditional predictions differ in shape")
    return eps_uncond + s * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class GuidanceWeights:
    lambda_2d3d: float = 1.0
    lambda_3d: float = 40.0
    scale_2d: float = 100.0
    scale_3d: float = 5.0

    def __post_init__(self):
        for k in ("lambda_2d3d", "lambda_3d", "scale_2d", "scale_3d"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")


@dataclass(frozen=True)
class PoseCondition:
    """Conditioning for a pose-aware prior: reference image and relative pose.

    `shading` and `light` tell image-space oracles how the rendered view was lit.
    """

    ref_image: np.ndarray
    d_polar: float
    d_azimuth: float
    d_radius: float
    shading: str = "albedo"
    light: tuple | None = None


class TargetDenoiser:
    """Optimal denoiser for a point mass at `target` (pixel space, no condition branch)."""

    def __init__(self, target: np.ndarray, schedule: NoiseSchedule | None = None):
        self.target = np.array(target, dtype=np.float64)
        self.target.setflags(write=False)
        self.schedule = schedule or NoiseSchedule()

    def predict_noise(self, z_t, t, condition=None):
        ab = self.schedule.alpha_bar(t)
        return (z_t - math.sqrt(ab) * self.target) / math.sqrt(1.0 - ab)


class MultiviewOracle:
    """Pose-conditioned mock: denoises toward an exact render of a known scene at the conditioned pose."""

    def __init__(self, render_fn, ref_camera: Camera, schedule: NoiseSchedule | None = None):
        # render_fn(camera, shading, light) -> (H, W, 3) image
        self.render_fn = render_fn
        self.ref_camera = ref_camera
        self.schedule = schedule or NoiseSchedule()

    def target(self, condition: PoseCondition, shape) -> np.ndarray:
        cam = apply_relative_pose(self.ref_camera, condition.d_polar, condition.d_azimuth, condition.d_radius)
        cam = cam.with_size(shape[1], shape[0])
        light = None if condition.light is None else np.asarray(condition.light)
        return self.render_fn(cam, condition.shading, light)

    def predict_noise(self, z_t, t, condition: PoseCondition):
        ab = self.schedule.alpha_bar(t)
        y = self.target(condition, z_t.shape)
        return (z_t - math.sqrt(ab) * y) / math.sqrt(1.0 - ab)


def make_target_denoiser(target, schedule=None) -> TargetDenoiser:
    return TargetDenoiser(target, schedule)


def make_multiview_oracle(scene, ref_camera: Camera, schedule=None) -> MultiviewOracle:
    """`scene` is anything with render(camera, shading, light) returning an object with `.rgb`."""
    return MultiviewOracle(lambda cam, shading, light: scene.render(cam, shading, light).rgb, ref_camera, schedule)


def _predict(provider, z_t, t, condition, scale):
    eps_c = provider.predict_noise(z_t, t, condition)
    uncond = getattr(provider, "predict_noise_uncond", None)
    if uncond is None:
        return eps_c
    return cfg_combine(eps_c, uncond(z_t, t), scale)


def sds_grad_2d(provider, image, t, eps, weights: GuidanceWeights | None = None, prompt="<e>",
                schedule: NoiseSchedule | None = None) -> np.ndarray:
    schedule = schedule or getattr(provider, "schedule", None) or NoiseSchedule()
    weights = weights or GuidanceWeights()
    z_t = add_noise(image, t, eps, schedule)
    eps_hat = _predict(provider, z_t, t, prompt, weights.scale_2d)
    return schedule.weight(t) * (eps_hat - eps)


def sds_grad_3d(provider, image, ref_image, camera: Camera, ref_camera: Camera, t, eps,
                weights: GuidanceWeights | None = None, shading: str = "albedo", light=None,
                schedule: NoiseSchedule | None = None) -> np.ndarray:
    schedule = schedule or getattr(provider, "schedule", None) or NoiseSchedule()
    weights = weights or GuidanceWeights()
    dp, da, dr = relative_pose(ref_camera, camera)
    cond = PoseCondition(ref_image, dp, da, dr, shading, None if light is None else tuple(np.asarray(light)))
    z_t = add_noise(image, t, eps, schedule)
    eps_hat = _predict(provider, z_t, t, cond, weights.scale_3d)
    return schedule.weight(t) * (eps_hat - eps)


@dataclass
class JointGuidance:
    grad: np.ndarray
    grad_2d: np.ndarray
    grad_3d: np.ndarray
    t_2d: int
    t_3d: int

    @property
    def magnitude(self) -> float:
        return float(np.mean(np.abs(self.grad)))


def draw_noise(shape, schedule: NoiseSchedule, rng: np.random.Generator):
    """(t1, eps1, t2, eps2), always drawn in this order so streams stay aligned."""
    t1 = sample_timestep(schedule, rng)
    e1 = rng.standard_normal(shape)
    t2 = sample_timestep(schedule, rng)
    e2 = rng.standard_normal(shape)
    return t1, e1, t2, e2


def joint_guidance_grad(p2d, p3d, image, ref_image, cams: tuple[Camera, Camera], weights: GuidanceWeights,
                        rng: np.random.Generator | None = None, draws=None, shading: str = "albedo",
                        light=None, schedule: NoiseSchedule | None = None, prompt="<e>") -> JointGuidance:
    """lambda_2d3d * g_2d + lambda_3d * g_3d for one rendered novel view.

    `cams` is (novel camera, reference camera). Pass `draws` to freeze (t1, eps1, t2, eps2).
    A prior whose weight is zero (or that is None) is not evaluated; its term is exactly zero.
    """
    schedule = schedule or NoiseSchedule()
    camera, ref_camera = cams
    if draws is None:
        draws = draw_noise(image.shape, schedule, rng)
    t1, e1, t2, e2 = draws
    zero = np.zeros_like(image)
    g2 = zero
    g3 = zero
    if p2d is not None and weights.lambda_2d3d != 0:
        g2 = sds_grad_2d(p2d, image, t1, e1, weights, prompt, schedule)
    if p3d is not None and weights.lambda_3d != 0:
        g3 = sds_grad_3d(p3d, image, ref_image, camera, ref_camera, t2, e2, weights, shading, light, schedule)
    grad = weights.lambda_2d3d * g2 + weights.lambda_3d * g3
    return JointGuidance(grad, g2, g3, t1, t2)
