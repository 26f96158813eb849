import math

import numpy as np
import pytest

from monorecon.geometry import Camera
from monorecon.guidance import (GuidanceWeights, NoiseSchedule, TargetDenoiser, add_noise, cfg_combine, draw_noise,
                                joint_guidance_grad, make_multiview_oracle, make_target_denoiser, sample_timestep,
                                sds_grad_2d, sds_grad_3d)
from monorecon.optim import ParamStore, adam_step
from monorecon.scenes import make_scene

REF = Camera(90, 0, 1.8, 40, 16, 16)


class EchoNoise:
    """Provider that returns exactly the injected noise."""

    def __init__(self, schedule):
        self.schedule = schedule
        self.eps = None

    def predict_noise(self, z_t, t, condition=None):
        return self.eps


def _abar_reference(T=1000):
    out, prod = [1.0], 1.0
    for i in range(T):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / (T - 1))
        out.append(prod)
    return out


def test_schedule_matches_python_product():
    s = NoiseSchedule()
    ref = _abar_reference()
    for t in (1, 2, 10, 500, 999, 1000):
        assert s.alpha_bar(t) == pytest.approx(ref[t], rel=1e-12)


def test_schedule_endpoints_and_monotone():
    s = NoiseSchedule()
    a = np.array([s.alpha_bar(t) for t in range(1, 1001)])
    assert a[0] > 0.999 and a[-1] < 0.01
    assert np.all(np.diff(a) < 0)
    w = np.array([s.weight(t) for t in range(1, 1001)])
    assert np.all(np.diff(w) > 0)


def test_add_noise_limits_and_errors():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(8, 8, 3))
    eps = np.clip(rng.standard_normal(x.shape), -1, 1)
    assert np.max(np.abs(add_noise(x, 1, eps) - x)) < 0.02
    z = add_noise(x, 1000, eps)
    assert np.linalg.norm(z - eps) < 0.2 * np.linalg.norm(z - x)
    with pytest.raises(ValueError):
        add_noise(x, 0, eps)
    with pytest.raises(ValueError):
        add_noise(x, 1001, eps)


def test_add_noise_variance():
    s = NoiseSchedule()
    rng = np.random.default_rng(1)
    t = 300
    z = add_noise(np.zeros(10_000), t, rng.standard_normal(10_000), s)
    assert abs(z.var() / (1 - s.alpha_bar(t)) - 1) < 0.05


def test_cfg_combine():
    rng = np.random.default_rng(2)
    c, u = rng.normal(size=(2, 4, 4))
    np.testing.assert_allclose(cfg_combine(c, u, 1.0), c, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(cfg_combine(c, u, 0.0), u)
    np.testing.assert_array_equal(cfg_combine(c, c, 7.5), c)
    with pytest.raises(ValueError):
        cfg_combine(c, u[:2], 2.0)


def test_timestep_range():
    s = NoiseSchedule()
    rng = np.random.default_rng(3)
    ts = np.array([sample_timestep(s, rng) for _ in range(10_000)])
    assert ts.min() >= 20 and ts.max() <= 980
    assert abs(ts.mean() - 500) < 0.03 * 500
    fixed = NoiseSchedule(t_min_frac=0.5, t_max_frac=0.5)
    assert {sample_timestep(fixed, rng) for _ in range(50)} == {500}


def test_sds_fixed_point_is_exactly_zero():
    s = NoiseSchedule()
    rng = np.random.default_rng(4)
    img = rng.uniform(size=(6, 6, 3))
    p = EchoNoise(s)
    for t in (20, 400, 980):
        p.eps = rng.standard_normal(img.shape)
        assert np.all(sds_grad_2d(p, img, t, p.eps, schedule=s) == 0.0)
        assert np.all(sds_grad_3d(p, img, img, Camera(70, 40, 1.8), REF, t, p.eps, schedule=s) == 0.0)


def test_target_denoiser_closed_form():
    s = NoiseSchedule()
    rng = np.random.default_rng(5)
    for _ in range(20):
        target = rng.uniform(size=(5, 7, 3))
        img = rng.uniform(size=(5, 7, 3))
        t = sample_timestep(s, rng)
        eps = rng.standard_normal(img.shape)
        g = sds_grad_2d(make_target_denoiser(target, s), img, t, eps, schedule=s)
        ab = s.alpha_bar(t)
        want = (1 - ab) * math.sqrt(ab) / math.sqrt(1 - ab) * (img - target)
        assert np.max(np.abs(g - want)) < 1e-12


def test_target_denoiser_zero_at_target():
    s = NoiseSchedule()
    rng = np.random.default_rng(6)
    y = rng.uniform(size=(4, 4, 3))
    for t in (20, 500, 980):
        g = sds_grad_2d(TargetDenoiser(y, s), y.copy(), t, rng.standard_normal(y.shape), schedule=s)
        assert np.max(np.abs(g)) < 1e-12


def test_free_image_converges_to_target():
    s = NoiseSchedule()
    rng = np.random.default_rng(7)
    target = rng.uniform(size=(16, 16, 3))
    p = make_target_denoiser(target, s)
    store = ParamStore()
    img = store.add("img", np.full(target.shape, 0.5))
    for _ in range(500):
        store.zero_grad()
        t = sample_timestep(s, rng)
        store.grads["img"] += sds_grad_2d(p, img, t, rng.standard_normal(img.shape), schedule=s)
        adam_step(store, lr=1e-2)
    assert np.mean((img - target) ** 2) < 1e-3


def test_multiview_oracle_closed_form():
    s = NoiseSchedule()
    scene = make_scene("sphere")
    p = make_multiview_oracle(scene, REF, s)
    rng = np.random.default_rng(8)
    cam = Camera(75, 130, 1.8, 40, 16, 16)
    img = rng.uniform(size=(16, 16, 3))
    t, eps = 300, rng.standard_normal(img.shape)
    g = sds_grad_3d(p, img, img, cam, REF, t, eps, schedule=s)
    ab = s.alpha_bar(t)
    want = math.sqrt(ab) * math.sqrt(1 - ab) * (img - scene.render(cam).rgb)
    assert np.max(np.abs(g - want)) < 1e-12


def test_oracle_at_reference_pose_targets_reference():
    s = NoiseSchedule()
    scene = make_scene("sphere")
    ref_img = scene.render(REF).rgb
    p = make_multiview_oracle(scene, REF, s)
    img = np.random.default_rng(9).uniform(size=ref_img.shape)
    g = sds_grad_3d(p, img, ref_img, REF, REF, 100, np.zeros_like(img), schedule=s)
    ab = s.alpha_bar(100)
    np.testing.assert_allclose(g, math.sqrt(ab * (1 - ab)) * (img - ref_img), atol=1e-12)


def _joint_setup():
    s = NoiseSchedule()
    scene = make_scene("sphere")
    ref_img = scene.render(REF).rgb
    p2 = make_target_denoiser(ref_img, s)
    p3 = make_multiview_oracle(scene, REF, s)
    img = np.random.default_rng(10).uniform(size=ref_img.shape)
    draws = draw_noise(img.shape, s, np.random.default_rng(11))
    return s, p2, p3, img, ref_img, draws


def test_joint_is_exact_linear_combination():
    s, p2, p3, img, ref_img, draws = _joint_setup()
    cam = Camera(100, 200, 1.8, 40, 16, 16)
    t1, e1, t2, e2 = draws
    w = GuidanceWeights(0.7, 13.0)
    jg = joint_guidance_grad(p2, p3, img, ref_img, (cam, REF), w, draws=draws, schedule=s)
    g2 = sds_grad_2d(p2, img, t1, e1, w, schedule=s)
    g3 = sds_grad_3d(p3, img, ref_img, cam, REF, t2, e2, w, schedule=s)
    np.testing.assert_array_equal(jg.grad, 0.7 * g2 + 13.0 * g3)


def test_joint_edge_cases_are_pure_priors():
    s, p2, p3, img, ref_img, draws = _joint_setup()
    cam = Camera(100, 200, 1.8, 40, 16, 16)
    t1, e1, t2, e2 = draws
    g3 = sds_grad_3d(p3, img, ref_img, cam, REF, t2, e2, schedule=s)
    g2 = sds_grad_2d(p2, img, t1, e1, schedule=s)
    only3 = joint_guidance_grad(p2, p3, img, ref_img, (cam, REF), GuidanceWeights(0.0, 40.0), draws=draws, schedule=s)
    only2 = joint_guidance_grad(p2, p3, img, ref_img, (cam, REF), GuidanceWeights(1.0, 0.0), draws=draws, schedule=s)
    np.testing.assert_array_equal(only3.grad, 40.0 * g3)
    np.testing.assert_array_equal(only2.grad, g2)


def test_joint_homogeneity_and_monotone_component():
    s, p2, p3, img, ref_img, draws = _joint_setup()
    cam = Camera(80, 30, 1.8, 40, 16, 16)
    a = joint_guidance_grad(p2, p3, img, ref_img, (cam, REF), GuidanceWeights(1.0, 40.0), draws=draws, schedule=s)
    b = joint_guidance_grad(p2, p3, img, ref_img, (cam, REF), GuidanceWeights(2.0, 80.0), draws=draws, schedule=s)
    np.testing.assert_array_equal(b.grad, 2.0 * a.grad)
    c = joint_guidance_grad(p2, p3, img, ref_img, (cam, REF), GuidanceWeights(3.0, 40.0), draws=draws, schedule=s)
    np.testing.assert_array_equal(c.grad_3d, a.grad_3d)
    assert np.linalg.norm(3.0 * c.grad_2d) > np.linalg.norm(1.0 * a.grad_2d)


def test_draws_are_seeded():
    s = NoiseSchedule()
    a = draw_noise((4, 4, 3), s, np.random.default_rng(12))
    b = draw_noise((4, 4, 3), s, np.random.default_rng(12))
    assert a[0] == b[0] and a[2] == b[2]
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[3], b[3])


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        GuidanceWeights(lambda_3d=-1.0)
