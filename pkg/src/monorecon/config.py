"""Flat ``key = value`` configuration with typed defaults.

Files are UTF-8, one assignment per line, ``#`` starts a comment. Every key
has a default below and its type is taken from that default. Unknown keys are
rejected with the list of valid ones. Later assignments win, so command-line
``--set`` overrides applied after the file beat file values.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "scene.preset": "sphere",
    "scene.depth_affine": True,
    "io.outdir": "out",
    "io.reference_dir": "",
    "camera.polar_deg": 90.0,
    "camera.azimuth_deg": 0.0,
    "camera.radius_m": 1.8,
    "camera.fov_y_deg": 40.0,
    "novel.polar_min": 60.0,
    "novel.polar_max": 120.0,
    "field.precision": "float32",
    "guidance.provider_2d": "reference",
    "guidance.provider_3d": "oracle",
    "guidance.lambda_2d3d": 1.0,
    "guidance.lambda_3d": 40.0,
    "guidance.scale_2d": 100.0,
    "guidance.scale_3d": 5.0,
    "guidance.steps": 1000,
    "guidance.t_min_frac": 0.02,
    "guidance.t_max_frac": 0.98,
    "guidance.on_reference": False,
    "coarse.iterations": 5000,
    "coarse.lr": 1e-3,
    "coarse.resolution": 64,
    "coarse.n_samples": 32,
    "coarse.normal_cutoff": 1e-2,
    "coarse.lambda_rgb": 5.0,
    "coarse.lambda_mask": 0.5,
    "coarse.lambda_d": 0.001,
    "coarse.lambda_n": 0.5,
    "coarse.normal_iters": 3000,
    "coarse.normal_shading": "normal",
    "coarse.p_lambertian": 0.75,
    "coarse.p_textureless": 0.25,
    "coarse.log_every": 100,
    "coarse.checkpoint_every": 500,
    "fine.iterations": 5000,
    "fine.lr": 1e-3,
    "fine.resolution": 0,
    "fine.grid_resolution": 48,
    "fine.sigma_thr": 10.0,
    "fine.sigma_search": False,
    "fine.deform_clamp": 0.15,
    "fine.lambda_2d3d": 0.001,
    "fine.lambda_3d": 0.01,
    "fine.lambda_rgb": 5.0,
    "fine.lambda_d": 0.001,
    "fine.lambda_n": 0.5,
    "fine.p_lambertian": 0.75,
    "fine.p_textureless": 0.25,
    "fine.log_every": 100,
    "fine.checkpoint_every": 500,
    "eval.n_views": 8,
    "eval.resolution": 64,
    "render.frames": 36,
    "render.resolution": 128,
}

CHOICES = {
    "scene.preset": ("sphere", "box", "snowman"),
    "field.precision": ("float32", "float64"),
    "guidance.provider_2d": ("none", "reference"),
    "guidance.provider_3d": ("none", "oracle"),
    "coarse.normal_shading": ("normal", "textureless"),
}

FINE_RES_FACTOR = 8


class ConfigError(ValueError):
    pass


def _parse(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                val = True
            elif low in ("0", "false", "no", "off"):
                val = False
            else:
                raise ValueError(text)
        elif isinstance(default, int):
            val = int(text)
        elif isinstance(default, float):
            val = float(text)
        else:
            val = text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    if key in CHOICES and val not in CHOICES[key]:
        raise ConfigError(f"{key}: {val!r} is not one of {', '.join(CHOICES[key])}")
    return val


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


@dataclass
class Config:
    values: dict

    @classmethod
    def default(cls) -> "Config":
        return cls(dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, text: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sorted(DEFAULTS))}")
        self.values[key] = _parse(key, text)

    def update(self, assignments) -> "Config":
        """Apply ``key=value`` strings in order."""
        for a in assignments:
            key, sep, text = a.partition("=")
            if not sep:
                raise ConfigError(f"expected key=value, got {a!r}")
            self.set(key.strip(), text)
        return self

    def load_text(self, text: str, source: str = "<config>") -> "Config":
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            key, sep, val = body.partition("=")
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            try:
                self.set(key.strip(), val)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return self

    def load_file(self, path) -> "Config":
        with open(path, "r", encoding="utf-8") as f:
            return self.load_text(f.read(), str(path))

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in DEFAULTS)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    def fine_resolution(self) -> int:
        r = self.values["fine.resolution"]
        return r if r > 0 else FINE_RES_FACTOR * self.values["coarse.resolution"]

    def validate(self) -> None:
        for stage in ("coarse", "fine"):
            if self.values[f"{stage}.iterations"] < 0:
                raise ConfigError(f"{stage}.iterations must be non-negative")
            p = self.values[f"{stage}.p_lambertian"] + self.values[f"{stage}.p_textureless"]
            if abs(p - 1.0) > 1e-9:
                raise ConfigError(f"{stage} shading probabilities must sum to 1 (got {p})")
        if not self.values["novel.polar_min"] <= self.values["novel.polar_max"]:
            raise ConfigError("novel.polar_min exceeds novel.polar_max")


def load_config(path=None, overrides=(), seed: int | None = None) -> Config:
    cfg = Config.default()
    if path is not None:
        cfg.load_file(path)
    cfg.update(overrides)
    if seed is not None:
        cfg.values["seed"] = int(seed)
    cfg.validate()
    return cfg
