"""
Score distillation with analytic priors
=======================================

The 2D mock prior predicts the noise that would turn the current image into
a fixed target, so its distillation gradient is a scaled residual. Following
it with Adam recovers the target. The 3D mock prior does the same but asks
the analytic scene what the object looks like from the queried pose.
"""

import numpy as np

from monorecon.geometry import Camera
from monorecon.guidance import (GuidanceWeights, NoiseSchedule, draw_noise, joint_guidance_grad,
                                make_multiview_oracle, make_target_denoiser, sample_timestep, sds_grad_2d)
from monorecon.optim import ParamStore, adam_step
from monorecon.scenes import make_scene

schedule = NoiseSchedule()
rng = np.random.default_rng(0)

# Free-image optimization against the target prior.
target = rng.uniform(size=(16, 16, 3))
prior = make_target_denoiser(target, schedule)
store = ParamStore()
img = store.add("img", np.full(target.shape, 0.5))
for step in range(500):
    store.zero_grad()
    t = sample_timestep(schedule, rng)
    store.grads["img"] += sds_grad_2d(prior, img, t, rng.standard_normal(img.shape), schedule=schedule)
    adam_step(store, lr=1e-2)
    if step % 100 == 99:
        print(f"step {step + 1:3d}  mse {np.mean((img - target) ** 2):.2e}")

# Blending the two priors is linear in the weights once the noise is frozen.
ref_cam = Camera(90, 0, 1.8, 40, 16, 16)
scene = make_scene("snowman")
ref_img = scene.render(ref_cam).rgb
p2 = make_target_denoiser(ref_img, schedule)
p3 = make_multiview_oracle(scene, ref_cam, schedule)
novel = Camera(80, 120, 1.8, 40, 16, 16)
guess = rng.uniform(size=ref_img.shape)
draws = draw_noise(guess.shape, schedule, rng)
for w2, w3 in ((1.0, 0.0), (0.0, 40.0), (1.0, 40.0)):
    jg = joint_guidance_grad(p2, p3, guess, ref_img, (novel, ref_cam), GuidanceWeights(w2, w3),
                             draws=draws, schedule=schedule)
    print(f"weights ({w2:g}, {w3:g})  mean |g| {jg.magnitude:.4f}")
