"""Spherical camera model and pixel-ray generation.

World frame is right-handed and y-up. A camera at polar 90 deg / azimuth 0 deg
sits on the +z axis and looks at the origin. Camera space follows the usual
computer-vision layout: x right, y down, z forward along the optical axis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

WORLD_UP = np.array([0.0, 1.0, 0.0])

# Range in which reconstruction is known to be insensitive to the camera guess.
SAFE_RADIUS = (1.0, 4.0)
SAFE_FOV = (20.0, 60.0)


@dataclass(frozen=True)
class Camera:
    polar_deg: float = 90.0
    azimuth_deg: float = 0.0
    radius_m: float = 1.8
    fov_y_deg: float = 40.0
    width_px: int = 64
    height_px: int = 64

    def __post_init__(self):
        if not 0.0 < self.polar_deg < 180.0:
            raise ValueError(f"polar_deg must lie in (0, 180), got {self.polar_deg}")
        if self.radius_m <= 0:
            raise ValueError(f"radius_m must be positive, got {self.radius_m}")
        if not 0.0 < self.fov_y_deg < 180.0:
            raise ValueError(f"fov_y_deg must lie in (0, 180), got {self.fov_y_deg}")
        if self.width_px <= 0 or self.height_px <= 0:
            raise ValueError("image size must be positive")
        # azimuth is periodic; keep it canonical
        object.__setattr__(self, "azimuth_deg", float(self.azimuth_deg) % 360.0)
        if not SAFE_RADIUS[0] <= self.radius_m <= SAFE_RADIUS[1]:
            warnings.warn(f"camera radius {self.radius_m} m outside the safe range {SAFE_RADIUS}",
                          stacklevel=3)
        if not SAFE_FOV[0] <= self.fov_y_deg <= SAFE_FOV[1]:
            warnings.warn(f"camera FOV {self.fov_y_deg} deg outside the safe range {SAFE_FOV}",
                          stacklevel=3)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    def with_size(self, width: int, height: int | None = None) -> "Camera":
        return replace(self, width_px=int(width), height_px=int(height or width))

    def with_pose(self, polar_deg=None, azimuth_deg=None, radius_m=None) -> "Camera":
        return replace(
            self,
            polar_deg=self.polar_deg if polar_deg is None else polar_deg,
            azimuth_deg=self.azimuth_deg if azimuth_deg is None else azimuth_deg,
            radius_m=self.radius_m if radius_m is None else radius_m,
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if not 0 < self.t_near < self.t_far:
            raise ValueError(f"need 0 < t_near < t_far, got {self.t_near}, {self.t_far}")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit-norm")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class RayGrid:
    """All pixel rays of one camera. Arrays are (H, W, 3)."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: float
    t_far: float
    camera: Camera = field(repr=False)

    @property
    def shape(self):
        return self.directions.shape[:2]

    def __getitem__(self, ij) -> Ray:
        i, j = ij
        return Ray(self.origins[i, j].copy(), self.directions[i, j].copy(), self.t_near, self.t_far)

    def flat(self):
        return self.origins.reshape(-1, 3), self.directions.reshape(-1, 3)


def camera_eye(camera: Camera) -> np.ndarray:
    th = math.radians(camera.polar_deg)
    ph = math.radians(camera.azimuth_deg)
    r = camera.radius_m
    return np.array([r * math.sin(th) * math.sin(ph), r * math.cos(th), r * math.sin(th) * math.cos(ph)])


def camera_basis(camera: Camera) -> np.ndarray:
    """Rows are the camera x (right), y (down) and z (forward) axes in world coordinates."""
    eye = camera_eye(camera)
    fwd = -eye / np.linalg.norm(eye)
    right = np.cross(fwd, WORLD_UP)
    n = np.linalg.norm(right)
    if n < 1e-9:
        # looking straight along the up axis; pick any consistent right vector
        right = np.cross(fwd, np.array([0.0, 0.0, -1.0]))
        n = np.linalg.norm(right)
    right /= n
    up = np.cross(right, fwd)
    return np.stack([right, -up, fwd])


def near_far(camera: Camera) -> tuple[float, float]:
    return max(camera.radius_m - 1.2, 0.05), camera.radius_m + 1.2


def camera_space_directions(camera: Camera) -> np.ndarray:
    """Unit pixel-center ray directions in camera space, (H, W, 3)."""
    h, w = camera.height_px, camera.width_px
    tan_y = math.tan(math.radians(camera.fov_y_deg) / 2)
    tan_x = tan_y * w / h
    u = ((np.arange(w) + 0.5) / w * 2 - 1) * tan_x
    v = ((np.arange(h) + 0.5) / h * 2 - 1) * tan_y
    d = np.stack(np.broadcast_arrays(u[None, :], v[:, None], np.ones((1, 1))), axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_rays(camera: Camera) -> RayGrid:
    basis = camera_basis(camera)
    dirs = camera_space_directions(camera) @ basis
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera_eye(camera), dirs.shape).copy()
    t_near, t_far = near_far(camera)
    return RayGrid(origins, dirs, t_near, t_far, camera)


def world_to_camera(camera: Camera, points: np.ndarray) -> np.ndarray:
    return (points - camera_eye(camera)) @ camera_basis(camera).T


def project(camera: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (col, row) and camera depth z of world points."""
    pc = world_to_camera(camera, points)
    tan_y = math.tan(math.radians(camera.fov_y_deg) / 2)
    tan_x = tan_y * camera.width_px / camera.height_px
    z = pc[..., 2]
    safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    col = (pc[..., 0] / safe / tan_x + 1) * camera.width_px / 2 - 0.5
    row = (pc[..., 1] / safe / tan_y + 1) * camera.height_px / 2 - 0.5
    return col, row, z


def relative_pose(ref: Camera, cam: Camera) -> tuple[float, float, float]:
    """(d_polar, d_azimuth, d_radius) taking the reference pose to `cam`; azimuth wrapped to [-180, 180)."""
    d_az = (cam.azimuth_deg - ref.azimuth_deg + 180.0) % 360.0 - 180.0
    return cam.polar_deg - ref.polar_deg, d_az, cam.radius_m - ref.radius_m


def apply_relative_pose(ref: Camera, d_polar: float, d_azimuth: float, d_radius: float) -> Camera:
    return ref.with_pose(ref.polar_deg + d_polar, ref.azimuth_deg + d_azimuth, ref.radius_m + d_radius)


def sample_hemisphere(rng: np.random.Generator, axis: np.ndarray) -> np.ndarray:
    """Uniform unit vector on the hemisphere around `axis`."""
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    if v @ axis < 0:
        v = -v
    return v
