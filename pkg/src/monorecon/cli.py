"""Command-line entry point.

    monorecon synth | coarse | fine | render | eval | gradcheck  [--config F] [--set k=v ...] [--seed N]

Exit status: 0 on success, 1 on usage or configuration errors, 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import ConfigError, load_config
from .geometry import camera_eye
from .gradcheck import TOLERANCE, run_gradcheck
from .meshrender import render_mesh
from .tets import import_obj, marching_tets

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="key = value config file (default: built-in defaults)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable, last one wins")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("--outdir", help="shorthand for --set io.outdir=DIR (default: out)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    p = _Parser(prog="monorecon", description="Coarse-to-fine single-image 3D reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write a synthetic reference bundle (I^r.png, M.png, d^r.pfm)")
    sub.add_parser("coarse", parents=[common], help="train the radiance-field stage")
    fine = sub.add_parser("fine", parents=[common], help="train the tetrahedral-mesh stage")
    fine.add_argument("--coarse-checkpoint", metavar="FILE",
                      help="coarse weights (default: OUTDIR/coarse/checkpoint.bin)")
    for name, text in (("render", "write a 36-frame turntable"), ("eval", "write metrics.json")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--stage", choices=("coarse", "fine"), default="coarse")
        q.add_argument("--checkpoint", metavar="FILE", help="default: OUTDIR/STAGE/checkpoint.bin")
        if name == "render":
            q.add_argument("--mesh", metavar="OBJ", help="render an OBJ with textureless shading instead")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every backward pass")
    return p


def _config(args):
    overrides = list(args.overrides)
    if args.outdir is not None:
        overrides.insert(0, f"io.outdir={args.outdir}")
    return load_config(args.config, overrides, args.seed)


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _echo_config(cfg):
    os.makedirs(cfg["io.outdir"], exist_ok=True)
    cfg.write(os.path.join(cfg["io.outdir"], "effective.cfg"))


def cmd_synth(cfg, args):
    from .pipeline import load_reference, write_reference
    _echo_config(cfg)
    for p in write_reference(load_reference(cfg), cfg["io.outdir"]):
        print(p)


def cmd_coarse(cfg, args):
    from .pipeline import run_coarse
    _echo_config(cfg)
    res = run_coarse(cfg)
    print(os.path.join(res.outdir, "checkpoint.bin"))


def cmd_fine(cfg, args):
    from .pipeline import load_coarse_store, run_fine
    _echo_config(cfg)
    path = args.coarse_checkpoint or os.path.join(cfg["io.outdir"], "coarse", "checkpoint.bin")
    store = load_coarse_store(_require(path))
    res = run_fine(cfg, store)
    print(os.path.join(res.outdir, "mesh.obj"))


def _stage_renderer(cfg, stage, checkpoint):
    """(render_fn(camera) -> rgb, evaluate() -> metrics)."""
    from . import pipeline as pl
    from .volume import render_view

    if stage == "coarse":
        store = pl.load_coarse_store(checkpoint)
        field = pl.new_field(cfg, store)
        ref = pl.load_reference(cfg)
        return (lambda cam: render_view(field, cam, "albedo", None, cfg["coarse.n_samples"]).rgb,
                lambda: pl.evaluate_coarse(cfg, field, ref))
    field, grid = pl.load_fine_state(cfg, checkpoint)
    mesh = marching_tets(grid)
    ref = None if cfg["io.reference_dir"] else pl.load_reference(cfg, cfg["eval.resolution"])
    return (lambda cam: render_mesh(mesh, field, cam, "albedo").rgb,
            lambda: pl.evaluate_mesh(cfg, mesh, field, ref))


def cmd_render(cfg, args):
    from .pipeline import reference_camera, render_turntable
    cam = reference_camera(cfg, cfg["render.resolution"])
    if args.mesh:
        mesh = import_obj(_require(args.mesh))

        class _Gray:
            def forward(self, x):
                return np.zeros(len(x)), np.full((len(x), 3), 0.5), None

        def render_fn(c):
            return render_mesh(mesh, _Gray(), c, "textureless", camera_eye(c) / c.radius_m).rgb
        outdir = os.path.dirname(os.path.abspath(args.mesh))
    else:
        d = os.path.join(cfg["io.outdir"], args.stage)
        render_fn, _ = _stage_renderer(cfg, args.stage, _require(args.checkpoint or os.path.join(d, "checkpoint.bin")))
        outdir = d
    paths = render_turntable(render_fn, cam, outdir, cfg["render.frames"])
    print(os.path.dirname(paths[0]))


def cmd_eval(cfg, args):
    import time
    from .pipeline import write_metrics
    t0 = time.perf_counter()
    d = os.path.join(cfg["io.outdir"], args.stage)
    _, evaluate = _stage_renderer(cfg, args.stage, _require(args.checkpoint or os.path.join(d, "checkpoint.bin")))
    metrics = evaluate()
    metrics["wall_seconds"] = time.perf_counter() - t0
    os.makedirs(d, exist_ok=True)
    path = os.path.join(d, "metrics.json")
    write_metrics(path, metrics)
    print(path)


def cmd_gradcheck(cfg, args):
    results = run_gradcheck(cfg["seed"])
    worst = 0.0
    for name, (err, secs) in results.items():
        print(f"{name:34s} max rel error {err:.3e}  ({secs:.1f} s)")
        worst = max(worst, err)
    if worst >= TOLERANCE:
        raise RuntimeError(f"gradient check failed: max rel error {worst:.3e} >= {TOLERANCE:g}")


COMMANDS = {"synth": cmd_synth, "coarse": cmd_coarse, "fine": cmd_fine, "render": cmd_render,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"monorecon: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"monorecon: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"monorecon: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        COMMANDS[args.command](cfg, args)
    except (FileNotFoundError, OSError) as exc:
        print(f"monorecon: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"monorecon: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
