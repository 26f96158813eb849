"""
Volume rendering an analytic sphere
===================================

A density field does not need to be learned to be rendered. Here the
synthetic sphere is turned into a near-opaque density and rendered with the
same stratified compositor the coarse stage trains through.
"""

import math
import os

import numpy as np

from monorecon.field import AnalyticField
from monorecon.geometry import Camera, Ray
from monorecon.imageio import save_image
from monorecon.scenes import make_scene
from monorecon.volume import render_ray, render_view

out = os.environ.get("DEMO_OUT", "demo_out")
os.makedirs(out, exist_ok=True)

# A unit-density segment of length 1 absorbs 1 - 1/e of the light.
unit = AnalyticField(lambda x: np.ones(x.shape[:-1]))
_, alpha, _ = render_ray(unit, Ray(np.zeros(3), np.array([0, 0, 1.0]), 1.0, 2.0), 256)
print(f"alpha {alpha:.5f}  vs  1 - 1/e = {1 - math.exp(-1):.5f}")

# The sphere scene, volumetrically.
scene = make_scene("sphere")
cam = Camera(75, 30, 1.8, 40, 64, 64)
view = render_view(scene.density_field(1000.0), cam, "albedo", None, 64)
exact = scene.render(cam)
print(f"mask agreement with the sphere tracer: {np.mean((view.mask > 0.5) == (exact.mask > 0.5)):.4f}")

save_image(os.path.join(out, "sphere_volume.png"), view.rgb)
save_image(os.path.join(out, "sphere_traced.png"), exact.rgb)

# Lambertian shading from a light over the camera's shoulder.
light = np.array([0.3, 0.6, 0.74])
light /= np.linalg.norm(light)
shaded = render_view(scene.density_field(1000.0, sharpness=80.0), cam, "lambertian", light, 64)
save_image(os.path.join(out, "sphere_lambertian.png"), shaded.rgb)
print("wrote", out)
