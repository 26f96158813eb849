"""Coarse (radiance field) and fine (tetrahedral mesh) training loops, evaluation and outputs.

Randomness: iteration `it` of stage k draws everything from
``default_rng([seed, k, it])`` in a fixed order (novel pose, shading, light,
reference-ray jitter, novel-ray jitter, guidance noise). Resuming from a
checkpoint therefore needs no generator state.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .config import Config
from .field import RadianceField
from .geometry import Camera, camera_eye, sample_hemisphere
from .guidance import GuidanceWeights, NoiseSchedule, TargetDenoiser, joint_guidance_grad, make_multiview_oracle
from .imageio import load_image, read_pfm, save_image, write_pfm
from .losses import LossWeights, total_coarse_loss
from .meshrender import render_mesh
from .metrics import depth_corr, mask_iou, psnr, report_db
from .optim import ParamStore, adam_step, load_checkpoint, read_checkpoint, save_checkpoint
from .scenes import ReferenceBundle, make_scene, synthesize_reference
from .tets import build_grid, export_obj, init_sdf_from_density, marching_tets, marching_tets_backward
from .volume import depth_normal_map, depth_normal_map_backward, render_view

log = logging.getLogger("monorecon")

COARSE, FINE = 1, 2
REF_FILES = ("I^r.png", "M.png", "d^r.pfm")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: str | None):
        super().__init__(message + (f"; last good checkpoint: {checkpoint}" if checkpoint else ""))
        self.checkpoint = checkpoint


class EmptyMeshError(RuntimeError):
    pass


def reference_camera(cfg: Config, resolution: int | None = None) -> Camera:
    res = cfg["coarse.resolution"] if resolution is None else resolution
    return Camera(cfg["camera.polar_deg"], cfg["camera.azimuth_deg"], cfg["camera.radius_m"],
                  cfg["camera.fov_y_deg"], res, res)


def sample_novel_camera(ref: Camera, rng: np.random.Generator, polar_range=(60.0, 120.0)) -> Camera:
    polar = rng.uniform(*polar_range)
    azimuth = rng.uniform(0.0, 360.0)
    return Camera(polar, azimuth, ref.radius_m, 40.0, ref.width_px, ref.height_px)


def held_out_cameras(ref: Camera, n: int = 8) -> list[Camera]:
    """Fixed evaluation poses between the training draws: azimuth 22.5 + k*360/n, polar alternating 75/105."""
    return [ref.with_pose(75.0 if k % 2 == 0 else 105.0, 22.5 + k * 360.0 / n) for k in range(n)]


def turntable_cameras(ref: Camera, frames: int = 36) -> list[Camera]:
    return [ref.with_pose(90.0, k * 360.0 / frames) for k in range(frames)]


# ----------------------------------------------------------------------------- inputs

def load_reference(cfg: Config, resolution: int | None = None) -> ReferenceBundle:
    """Reference bundle from io.reference_dir, or synthesized from scene.preset."""
    cam = reference_camera(cfg, resolution)
    ref_dir = cfg["io.reference_dir"]
    if not ref_dir:
        scene = make_scene(cfg["scene.preset"])
        return synthesize_reference(scene, cam, (0.7, 0.3) if cfg["scene.depth_affine"] else None)
    paths = [os.path.join(ref_dir, n) for n in REF_FILES]
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"missing reference file {p}")
    rgb = load_image(paths[0], channels=3)
    mask = load_image(paths[1], channels=1)
    depth = read_pfm(paths[2])
    if rgb.shape[:2] != cam.shape or mask.shape != cam.shape or depth.shape != cam.shape:
        raise ValueError(f"reference images must be {cam.shape[1]}x{cam.shape[0]} to match coarse.resolution")
    return ReferenceBundle(rgb, mask, depth.astype(np.float64), cam)


def write_reference(bundle: ReferenceBundle, outdir) -> list[str]:
    os.makedirs(outdir, exist_ok=True)
    paths = [os.path.join(outdir, n) for n in REF_FILES]
    save_image(paths[0], bundle.rgb)
    save_image(paths[1], bundle.mask)
    write_pfm(paths[2], bundle.depth)
    return paths


def build_providers(cfg: Config, ref: ReferenceBundle, schedule: NoiseSchedule):
    p2d = None
    if cfg["guidance.provider_2d"] == "reference":
        # a pose-blind prior that only knows what the object looks like from the front
        p2d = TargetDenoiser(ref.rgb, schedule)
    p3d = None
    if cfg["guidance.provider_3d"] == "oracle":
        p3d = make_multiview_oracle(make_scene(cfg["scene.preset"]), ref.camera, schedule)
    return p2d, p3d


def noise_schedule(cfg: Config) -> NoiseSchedule:
    return NoiseSchedule(T=cfg["guidance.steps"], t_min_frac=cfg["guidance.t_min_frac"],
                         t_max_frac=cfg["guidance.t_max_frac"])


def new_field(cfg: Config, store: ParamStore | None = None) -> RadianceField:
    return RadianceField(store, seed=cfg["seed"], dtype=np.dtype(cfg["field.precision"]))


# ----------------------------------------------------------------------------- training

def _pick_shading(rng, normal_phase: bool, normal_mode: str, p_lambertian: float):
    u = rng.random()
    if normal_phase:
        return normal_mode
    return "lambertian" if u < p_lambertian else "textureless"


@dataclass
class StepStats:
    iteration: int
    loss: float
    recon: float
    depth: float
    normal: float
    guidance: float
    psnr_ref_db: float
    shading: str

    def as_dict(self):
        return dict(vars(self))


class _Trainer:
    stage = ""
    stage_id = 0

    def __init__(self, cfg: Config, ref: ReferenceBundle, p2d, p3d):
        self.cfg = cfg
        self.ref = ref
        self.p2d, self.p3d = p2d, p3d
        self.schedule = noise_schedule(cfg)
        self.history: list[StepStats] = []
        self.lr = cfg[f"{self.stage}.lr"]

    def rng(self, it: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg["seed"], self.stage_id, it])

    def novel_view(self, it, rng):
        cam = sample_novel_camera(self.render_camera, rng, (self.cfg["novel.polar_min"], self.cfg["novel.polar_max"]))
        normal_phase = self.stage == "coarse" and it < self.cfg["coarse.normal_iters"]
        mode = self.cfg["coarse.normal_shading"]
        shading = _pick_shading(rng, normal_phase, mode, self.cfg[f"{self.stage}.p_lambertian"])
        light = sample_hemisphere(rng, camera_eye(cam) / cam.radius_m)
        return cam, shading, (None if shading == "normal" else light)

    def guidance(self, image, cam, shading, light, rng):
        return joint_guidance_grad(self.p2d, self.p3d, image, self.ref_rgb, (cam, self.render_camera), self.gweights,
                                   rng, shading=shading, light=light, schedule=self.schedule)

    def fit(self, iterations: int, start: int = 0, outdir=None, checkpoint_every=None, log_every=None):
        ckpt = None if outdir is None else os.path.join(outdir, "checkpoint.bin")
        last_good = ckpt if ckpt and os.path.exists(ckpt) else None
        checkpoint_every = checkpoint_every or self.cfg[f"{self.stage}.checkpoint_every"]
        log_every = log_every or self.cfg[f"{self.stage}.log_every"]
        for it in range(start, iterations):
            try:
                st = self.step(it)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{self.stage} stage diverged at iteration {it}: {exc}", last_good) from exc
            self.history.append(st)
            if (it + 1) % log_every == 0 or it == start:
                log.info("%s it %5d  loss %.5f  guidance %.4g  ref psnr %.2f dB", self.stage, it + 1, st.loss,
                         st.guidance, st.psnr_ref_db)
            if ckpt and ((it + 1) % checkpoint_every == 0 or it + 1 == iterations):
                self.save(ckpt, it + 1)
                last_good = ckpt
        if ckpt and (iterations == 0 or start >= iterations):
            self.save(ckpt, max(start, iterations))
        return self.history


class CoarseTrainer(_Trainer):
    stage = "coarse"
    stage_id = COARSE

    def __init__(self, cfg: Config, ref: ReferenceBundle, p2d=None, p3d=None, store: ParamStore | None = None):
        super().__init__(cfg, ref, p2d, p3d)
        self.store = ParamStore() if store is None else store
        self.field = new_field(cfg, self.store)
        self.render_camera = ref.camera
        self.ref_rgb = ref.rgb
        self.weights = LossWeights(cfg["coarse.lambda_rgb"], cfg["coarse.lambda_mask"], cfg["coarse.lambda_d"],
                                   cfg["coarse.lambda_n"])
        self.gweights = GuidanceWeights(cfg["guidance.lambda_2d3d"], cfg["guidance.lambda_3d"],
                                        cfg["guidance.scale_2d"], cfg["guidance.scale_3d"])
        self.n_samples = cfg["coarse.n_samples"]
        self.cutoff = cfg["coarse.normal_cutoff"]

    def step(self, it: int) -> StepStats:
        rng = self.rng(it)
        self.store.zero_grad()
        cam, shading, light = self.novel_view(it, rng)
        ref, rc = self.ref, self.render_camera

        rv = render_view(self.field, rc, "albedo", None, self.n_samples, rng, self.cutoff)
        normals = depth_normal_map(rv.depth, rc)
        fg = ref.mask > 0.5
        loss = total_coarse_loss(rv.rgb, rv.mask, rv.depth, normals, ref.rgb, ref.mask, ref.depth, None,
                                 self.weights, depth_mask=fg & (rv.mask > 0.5))
        if not math.isfinite(loss.total):
            raise FloatingPointError("non-finite loss")
        d_depth = loss.d_depth
        if self.weights.lambda_n > 0:
            d_depth = d_depth + depth_normal_map_backward(rv.depth, rc, loss.d_normals)
        d_rgb = loss.d_rgb
        if self.cfg["guidance.on_reference"]:
            d_rgb = d_rgb + self.guidance(rv.rgb, rc, "albedo", None, rng).grad
        rv.backward(d_rgb, loss.d_mask, d_depth)

        mag = 0.0
        if self._guided():
            nv = render_view(self.field, cam, shading, light, self.n_samples, rng, self.cutoff)
            jg = self.guidance(nv.rgb, cam, shading, light, rng)
            nv.backward(jg.grad)
            mag = jg.magnitude
        adam_step(self.store, self.lr)
        return StepStats(it, loss.total, loss.recon, loss.depth, loss.normal, mag,
                         report_db(psnr(rv.rgb, ref.rgb)), shading)

    def _guided(self) -> bool:
        g = self.gweights
        return (self.p2d is not None and g.lambda_2d3d > 0) or (self.p3d is not None and g.lambda_3d > 0)

    def save(self, path, iteration: int):
        save_checkpoint(path, self.store, {"iteration": np.array(float(iteration))})

    def resume(self, path) -> int:
        _, extra = load_checkpoint(path, self.store)
        return int(extra["iteration"])


class FineTrainer(_Trainer):
    stage = "fine"
    stage_id = FINE

    def __init__(self, cfg: Config, ref: ReferenceBundle, coarse_store: ParamStore, p2d=None, p3d=None):
        """`ref` must be at the fine render resolution; field weights are copied from `coarse_store`."""
        super().__init__(cfg, ref, p2d, p3d)
        self.store = ParamStore()
        for n in coarse_store.names("field."):
            self.store.add(n, coarse_store.values[n])
        self.field = new_field(cfg, self.store)
        self.grid = build_grid(cfg["fine.grid_resolution"], cfg["fine.deform_clamp"])
        thr = cfg["fine.sigma_thr"]
        if cfg["fine.sigma_search"]:
            small = replace(ref.camera, width_px=cfg["coarse.resolution"], height_px=cfg["coarse.resolution"])
            thr = search_sigma_threshold(self.field, self.grid, small, thr, cfg["coarse.n_samples"])
            log.info("fine: sigma threshold %.4g", thr)
        init_sdf_from_density(self.field, self.grid, thr)
        self.grid.sdf = self.store.add("tet.sdf", self.grid.sdf)
        self.grid.deform = self.store.add("tet.deform", self.grid.deform)
        if marching_tets(self.grid).n_faces == 0:
            raise EmptyMeshError(f"no surface at sigma threshold {thr:g}; "
                                 "lower fine.sigma_thr so the coarse density crosses it")
        self.render_camera = ref.camera
        self.ref_rgb = ref.rgb
        self.weights = LossWeights(cfg["fine.lambda_rgb"], 0.0, cfg["fine.lambda_d"], cfg["fine.lambda_n"])
        self.gweights = GuidanceWeights(cfg["fine.lambda_2d3d"], cfg["fine.lambda_3d"],
                                        cfg["guidance.scale_2d"], cfg["guidance.scale_3d"])

    def mesh(self):
        return marching_tets(self.grid)

    def step(self, it: int) -> StepStats:
        rng = self.rng(it)
        self.store.zero_grad()
        cam, shading, light = self.novel_view(it, rng)
        ref, rc = self.ref, self.render_camera
        mesh = self.mesh()
        if mesh.n_faces == 0:
            raise FloatingPointError("surface vanished")

        rv = render_mesh(mesh, self.field, rc, "albedo")
        normals = depth_normal_map(rv.depth, rc)
        both = (ref.mask > 0.5) & (rv.mask > 0.5)
        loss = total_coarse_loss(rv.rgb, rv.mask, rv.depth, normals, ref.rgb, ref.mask, ref.depth, None,
                                 self.weights, depth_mask=both, normal_mask=both)
        if not math.isfinite(loss.total):
            raise FloatingPointError("non-finite loss")
        d_depth = loss.d_depth
        if self.weights.lambda_n > 0:
            d_depth = d_depth + depth_normal_map_backward(rv.depth, rc, loss.d_normals)
        d_rgb = loss.d_rgb
        if self.cfg["guidance.on_reference"]:
            d_rgb = d_rgb + self.guidance(rv.rgb, rc, "albedo", None, rng).grad
        dverts = rv.backward(d_rgb, None, d_depth)

        g = self.gweights
        mag = 0.0
        if (self.p2d is not None and g.lambda_2d3d > 0) or (self.p3d is not None and g.lambda_3d > 0):
            nv = render_mesh(mesh, self.field, cam, shading, light)
            jg = self.guidance(nv.rgb, cam, shading, light, rng)
            dverts += nv.backward(jg.grad)
            mag = jg.magnitude
        d_sdf, d_def = marching_tets_backward(self.grid, mesh, dverts)
        self.store.grads["tet.sdf"] += d_sdf
        self.store.grads["tet.deform"] += d_def
        adam_step(self.store, self.lr)
        return StepStats(it, loss.total, loss.recon, loss.depth, loss.normal, mag,
                         report_db(psnr(rv.rgb, ref.rgb)), shading)

    def save(self, path, iteration: int):
        save_checkpoint(path, self.store, {"iteration": np.array(float(iteration)),
                                           "grid_resolution": np.array(float(self.grid.resolution))})

    def resume(self, path) -> int:
        _, extra = load_checkpoint(path, self.store)
        if int(extra.get("grid_resolution", self.grid.resolution)) != self.grid.resolution:
            raise ValueError(f"{path}: checkpoint grid resolution differs from fine.grid_resolution")
        return int(extra["iteration"])


# ----------------------------------------------------------------------------- stage drivers

@dataclass
class StageResult:
    trainer: object
    history: list
    metrics: dict = dc_field(default_factory=dict)
    outdir: str | None = None


def _stage_dir(cfg: Config, stage: str, outdir=None):
    base = cfg["io.outdir"] if outdir is None else outdir
    d = os.path.join(base, stage)
    os.makedirs(d, exist_ok=True)
    return d


def run_coarse(cfg: Config, ref: ReferenceBundle | None = None, providers=None, outdir=None,
               resume: bool = True, write_outputs: bool = True) -> StageResult:
    t0 = time.perf_counter()
    ref = load_reference(cfg) if ref is None else ref
    p2d, p3d = build_providers(cfg, ref, noise_schedule(cfg)) if providers is None else providers
    trainer = CoarseTrainer(cfg, ref, p2d, p3d)
    d = _stage_dir(cfg, "coarse", outdir) if write_outputs else None
    start = 0
    if d and resume and os.path.exists(os.path.join(d, "checkpoint.bin")):
        start = trainer.resume(os.path.join(d, "checkpoint.bin"))
        log.info("coarse: resuming at iteration %d", start)
    trainer.fit(cfg["coarse.iterations"], start, d)
    res = StageResult(trainer, trainer.history, outdir=d)
    res.metrics = evaluate_coarse(cfg, trainer.field, ref)
    res.metrics["wall_seconds"] = time.perf_counter() - t0
    if d:
        write_metrics(os.path.join(d, "metrics.json"), res.metrics)
        write_history(os.path.join(d, "log.jsonl"), trainer.history)
    return res


def search_sigma_threshold(field_, grid, camera: Camera, around: float, n_samples: int) -> float:
    """Density level, among 0.25x to 4x `around`, whose mesh silhouette best matches the field's alpha.

    Only the field itself is consulted, so the choice never sees the reference image.
    """
    target = render_view(field_, camera, "albedo", None, n_samples).mask > 0.5
    best, best_iou = around, -1.0
    for k in range(-8, 9):
        thr = around * 2.0 ** (k / 4)
        init_sdf_from_density(field_, grid, thr)
        mesh = marching_tets(grid)
        if mesh.n_faces == 0:
            continue
        iou = mask_iou(render_mesh(mesh, field_, camera, "albedo").mask, target)
        if iou > best_iou:
            best, best_iou = thr, iou
    return best


def fine_reference(cfg: Config, ref: ReferenceBundle | None = None) -> ReferenceBundle:
    res = cfg.fine_resolution()
    if ref is not None and ref.camera.shape == (res, res):
        return ref
    if cfg["io.reference_dir"]:
        raise ValueError("fine stage with file references needs fine.resolution equal to the reference size")
    return load_reference(cfg, res)


def run_fine(cfg: Config, coarse_store: ParamStore, ref: ReferenceBundle | None = None, providers=None,
             outdir=None, resume: bool = True, write_outputs: bool = True) -> StageResult:
    t0 = time.perf_counter()
    fref = fine_reference(cfg, ref)
    p2d, p3d = build_providers(cfg, fref, noise_schedule(cfg)) if providers is None else providers
    trainer = FineTrainer(cfg, fref, coarse_store, p2d, p3d)
    d = _stage_dir(cfg, "fine", outdir) if write_outputs else None
    start = 0
    if d and resume and os.path.exists(os.path.join(d, "checkpoint.bin")):
        start = trainer.resume(os.path.join(d, "checkpoint.bin"))
        log.info("fine: resuming at iteration %d", start)
    trainer.fit(cfg["fine.iterations"], start, d)
    res = StageResult(trainer, trainer.history, outdir=d)
    eval_ref = load_reference(cfg, cfg["eval.resolution"]) if not cfg["io.reference_dir"] else None
    res.metrics = evaluate_mesh(cfg, trainer.mesh(), trainer.field, eval_ref)
    res.metrics["wall_seconds"] = time.perf_counter() - t0
    if d:
        export_obj(trainer.mesh(), os.path.join(d, "mesh.obj"))
        write_metrics(os.path.join(d, "metrics.json"), res.metrics)
        write_history(os.path.join(d, "log.jsonl"), trainer.history)
    return res


def load_coarse_store(path) -> ParamStore:
    store, _ = load_checkpoint(path)
    return store


def load_fine_state(cfg: Config, path):
    """Rebuild (field, grid) from a fine checkpoint."""
    arrays = read_checkpoint(path)
    n = int(arrays.get("extra/grid_resolution", np.array(cfg["fine.grid_resolution"])))
    store, _ = load_checkpoint(path)
    field_ = new_field(cfg, store)
    grid = build_grid(n, cfg["fine.deform_clamp"])
    grid.sdf = store.values["tet.sdf"]
    grid.deform = store.values["tet.deform"]
    return field_, grid


# ----------------------------------------------------------------------------- evaluation and outputs

def _novel_scores(render_fn, ref: ReferenceBundle, cfg: Config):
    if cfg["io.reference_dir"]:
        return None
    scene = make_scene(cfg["scene.preset"])
    scores = []
    for cam in held_out_cameras(ref.camera, cfg["eval.n_views"]):
        scores.append(report_db(psnr(render_fn(cam), scene.render(cam).rgb)))
    return float(np.mean(scores))


def evaluate_coarse(cfg: Config, field_, ref: ReferenceBundle, n_samples: int | None = None) -> dict:
    """Reference-view and held-out novel-view metrics; renders use bin-center samples (no jitter)."""
    n_samples = n_samples or cfg["coarse.n_samples"]
    rv = render_view(field_, ref.camera, "albedo", None, n_samples)
    novel = _novel_scores(lambda cam: render_view(field_, cam, "albedo", None, n_samples).rgb, ref, cfg)
    return {
        "psnr_ref_db": report_db(psnr(rv.rgb, ref.rgb)),
        "mask_iou": mask_iou(rv.mask, ref.mask),
        "depth_pearson": depth_corr(rv.depth, ref.depth, ref.mask),
        "novel_psnr_mean_db": novel,
    }


def evaluate_mesh(cfg: Config, mesh, field_, ref: ReferenceBundle | None) -> dict:
    if ref is None:
        return {"psnr_ref_db": None, "mask_iou": None, "depth_pearson": None, "novel_psnr_mean_db": None}
    rv = render_mesh(mesh, field_, ref.camera, "albedo")
    novel = _novel_scores(lambda cam: render_mesh(mesh, field_, cam, "albedo").rgb, ref, cfg)
    # missed pixels have no depth at all, so correlate only where the mesh was hit
    both = (ref.mask > 0.5) & (rv.mask > 0.5)
    return {
        "psnr_ref_db": report_db(psnr(rv.rgb, ref.rgb)),
        "mask_iou": mask_iou(rv.mask, ref.mask),
        "depth_pearson": depth_corr(rv.depth, ref.depth, both),
        "novel_psnr_mean_db": novel,
    }


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")


def write_history(path, history) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for st in history:
            f.write(json.dumps(st.as_dict()) + "\n")


def render_turntable(render_fn, camera: Camera, outdir, frames: int = 36) -> list[str]:
    """`render_fn(camera) -> rgb`; writes renders/turntable_000.png onward."""
    d = os.path.join(outdir, "renders")
    os.makedirs(d, exist_ok=True)
    paths = []
    for k, cam in enumerate(turntable_cameras(camera, frames)):
        p = os.path.join(d, f"turntable_{k:03d}.png")
        save_image(p, np.clip(render_fn(cam), 0.0, 1.0))
        paths.append(p)
    return paths
