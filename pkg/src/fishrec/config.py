"""Flat ``key = value`` pipeline configuration.

Lines starting with ``#`` are comments.  Unknown keys are rejected.  List
values are comma separated.  Example::

    k = 6
    c_grid = 0.1, 1, 10
    gamma = auto
    seed = 7
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .partmodel import LearnConfig
from .saliency import SaliencyConfig
from .synthgen import GenConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # part model
    k: int = 6
    max_iter: int = 15
    part_conv_tol: float = 0.5
    ms_eps: float = 0.5
    scale_base: float = 2.0 ** (1.0 / 3.0)
    scale_range: tuple[int, ...] = (-2, -1, 0, 1, 2)
    lam_fit: float = 1.0
    lam_sep: float = 1.0
    lam_disc: float = 1.0
    ms_max_iter: int = 10
    size_max_iter: int = 5
    scale_sigma: float = 1.0
    # saliency
    sigma: float = 1.0
    nms_radius: int = 8
    init_part_side: int = 48
    # images and descriptors
    max_side: int = 200
    color: str = "auto"                 # auto | true | false
    # classifier
    c_grid: tuple[float, ...] = (0.1, 1.0, 10.0)
    gamma: str = "auto"                 # auto or a positive number
    cv_folds: int = 10
    use_thresholds: bool = True
    threshold_folds: int = 5            # < 2 fits thresholds on in-sample margins
    vote: bool = False
    # runtime
    seed: int = 0
    workers: int = 1
    # synthetic data
    synth_n_species: int = 5
    synth_images_per_species: int = 100
    synth_height: int = 160
    synth_width: int = 320
    synth_rotation: float = 15.0
    synth_scale_min: float = 0.85
    synth_scale_max: float = 1.15
    synth_flip_prob: float = 0.5
    synth_noise: float = 0.06
    synth_occlusion_prob: float = 0.1
    synth_color_cast: float = 0.0
    synth_haze: float = 0.0
    synth_imbalance: float = 1.0
    synth_color: bool = True

    def __post_init__(self):
        if self.color not in ("auto", "true", "false"):
            raise ConfigError("color must be auto, true or false")
        if self.gamma != "auto":
            try:
                g = float(self.gamma)
            except ValueError:
                raise ConfigError("gamma must be 'auto' or a number") from None
            if not g > 0:
                raise ConfigError("gamma must be > 0")
        if not self.c_grid or min(self.c_grid) <= 0:
            raise ConfigError("c_grid must hold positive values")
        if self.threshold_folds < 0:
            raise ConfigError("threshold_folds must be >= 0")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if self.workers < 1 or self.max_side < 1:
            raise ConfigError("workers and max_side must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        try:
            self.learn_config()
            self.gen_config()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def saliency_config(self) -> SaliencyConfig:
        return SaliencyConfig(self.sigma, self.nms_radius, self.init_part_side)

    def learn_config(self) -> LearnConfig:
        return LearnConfig(
            k=self.k, max_iter=self.max_iter, part_conv_tol=self.part_conv_tol,
            ms_eps=self.ms_eps, scale_base=self.scale_base, scale_range=tuple(self.scale_range),
            lam_fit=self.lam_fit, lam_sep=self.lam_sep, lam_disc=self.lam_disc,
            ms_max_iter=self.ms_max_iter, size_max_iter=self.size_max_iter,
            scale_sigma=self.scale_sigma, saliency=self.saliency_config())

    def gen_config(self) -> GenConfig:
        return GenConfig(
            n_species=self.synth_n_species, images_per_species=self.synth_images_per_species,
            height=self.synth_height, width=self.synth_width, rotation=self.synth_rotation,
            scale=(self.synth_scale_min, self.synth_scale_max), flip_prob=self.synth_flip_prob,
            noise=self.synth_noise, occlusion_prob=self.synth_occlusion_prob,
            color_cast=self.synth_color_cast, haze=self.synth_haze,
            imbalance=self.synth_imbalance, color=self.synth_color, seed=self.seed)

    def gamma_value(self) -> float | None:
        return None if self.gamma == "auto" else float(self.gamma)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["c_grid"] = list(self.c_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        for key in ("scale_range", "c_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def with_overrides(self, **kw) -> "PipelineConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            conv = type(default[0]) if default else float
            return tuple(conv(v) for v in raw.split(",") if v.strip())
        return raw.lower() if name in ("color", "gamma") else raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[pipeline]\n" + text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    defaults = PipelineConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(PipelineConfig)}
    values = {}
    for key, raw in parser.items("pipeline"):
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _parse_value(key, raw, known[key])
    try:
        return PipelineConfig(**values)
    except TypeError as err:
        raise ConfigError(str(err)) from None


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return parse_config(Path(path).read_text())


# Harder synthetic setting used by the benchmark: colour casts, haze, heavier
# noise, more rotation and occlusion, so the flat baseline is no longer perfect.
HARD_SYNTH = dict(synth_noise=0.08, synth_occlusion_prob=0.2, synth_color_cast=0.1,
                  synth_haze=0.2, synth_rotation=20.0)


def hard_benchmark_config(**overrides) -> PipelineConfig:
    return PipelineConfig(**{**HARD_SYNTH, **overrides})
