"""Deterministic synthetic fish-like images with masks and trajectory labels.

Each species is a body ellipse plus a tail triangle and a few fins, painted
with a species-specific base colour and texture.  Species come in similarity
groups that share body shape and colour, so telling group members apart
requires looking at local parts (fins, tail, texture).  Consecutive frames of
one rendered individual share a trajectory id and drift slightly in pose.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import write_image, write_mask


@dataclass(frozen=True)
class SpeciesSpec:
    name: str
    body: tuple[float, float]                 # semi-axes (along, across), canvas-height units
    tail: float                               # tail triangle length, body-length units
    fins: tuple[tuple[float, int, float], ...]  # (position along body in [-1, 1], side +-1, size)
    texture: str                              # "stripes", "spots" or "plain"
    tex_freq: float
    tex_contrast: float
    color: tuple[float, float, float]
    fin_color: tuple[float, float, float]


@dataclass(frozen=True)
class GenConfig:
    n_species: int = 5
    images_per_species: int = 100
    height: int = 160
    width: int = 320
    rotation: float = 15.0          # degrees, +-
    scale: tuple[float, float] = (0.85, 1.15)
    flip_prob: float = 0.5
    noise: float = 0.06
    occlusion_prob: float = 0.1
    color_cast: float = 0.0         # std of a per-trajectory multiplicative RGB cast
    haze: float = 0.0               # max blend weight towards a flat water colour
    frames: tuple[int, int] = (3, 5)
    imbalance: float = 1.0          # largest / smallest class size
    color: bool = True
    seed: int = 0
    species: tuple[SpeciesSpec, ...] = field(default=())

    def __post_init__(self):
        if self.n_species < 1 or self.images_per_species < 1:
            raise ValueError("need at least one species and one image per species")
        if self.height < 16 or self.width < 16:
            raise ValueError("canvas too small")
        if not (0 < self.scale[0] <= self.scale[1]):
            raise ValueError("bad scale range")
        if not (0 <= self.flip_prob <= 1 and 0 <= self.occlusion_prob <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.noise < 0 or self.imbalance < 1:
            raise ValueError("noise must be >= 0 and imbalance >= 1")
        if self.color_cast < 0 or not 0 <= self.haze < 1:
            raise ValueError("color_cast must be >= 0 and haze in [0, 1)")
        if not (1 <= self.frames[0] <= self.frames[1]):
            raise ValueError("bad frame range")
        if self.species and len(self.species) != self.n_species:
            raise ValueError("species list length differs from n_species")

    def species_specs(self) -> tuple[SpeciesSpec, ...]:
        return self.species or default_species(self.n_species)

    def class_sizes(self) -> list[int]:
        s = self.n_species
        if s == 1 or self.imbalance == 1:
            return [self.images_per_species] * s
        ratios = self.imbalance ** (-np.arange(s) / (s - 1))
        return [max(1, int(np.floor(self.images_per_species * r + 0.5))) for r in ratios]


_PALETTE = [(0.80, 0.55, 0.25), (0.35, 0.50, 0.70), (0.60, 0.60, 0.55)]


def default_species(n: int) -> tuple[SpeciesSpec, ...]:
    """``n`` species in groups of up to three sharing body shape and colour."""
    out = []
    for s in range(n):
        g, member = divmod(s, 3)
        base = _PALETTE[g % len(_PALETTE)]
        body = (0.32 + 0.03 * g, 0.13 + 0.02 * ((g + 1) % 2))
        tail = (0.28, 0.40, 0.20)[member % 3]
        fins = (((-0.1, 1, 0.30), (0.2, -1, 0.22)),
                ((0.35, 1, 0.22), (0.35, -1, 0.22), (-0.3, 1, 0.18)),
                ((-0.35, -1, 0.30),))[member % 3]
        texture = ("stripes", "spots", "plain")[member % 3]
        fin_color = tuple(float(np.clip(c * (0.55 + 0.25 * member), 0, 1)) for c in base)
        out.append(SpeciesSpec(f"sp{s}", body, tail, fins, texture,
                               tex_freq=5.0 + 2.0 * member, tex_contrast=0.22,
                               color=base, fin_color=fin_color))
    return tuple(out)


def _in_triangle(px, py, tri):
    (x1, y1), (x2, y2), (x3, y3) = tri
    d1 = (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2)
    d2 = (px - x3) * (y2 - y3) - (x2 - x3) * (py - y3)
    d3 = (px - x1) * (y3 - y1) - (x3 - x1) * (py - y1)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def render(spec: SpeciesSpec, pose: dict, cfg: GenConfig, rng: np.random.Generator):
    """Render one fish; returns ``(image, mask)`` with the mask equal to the visible silhouette."""
    h, w = cfg.height, cfg.width
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    # canvas -> fish frame (u along body, v across; units of canvas height)
    x = (xs - pose["cx"] * w) / h
    y = (ys - pose["cy"] * h) / h
    c, s = np.cos(pose["angle"]), np.sin(pose["angle"])
    u = (c * x + s * y) / pose["scale"]
    v = (-s * x + c * y) / pose["scale"]
    if pose["flip"]:
        u = -u
    a, b = spec.body
    body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    tl = spec.tail * 2 * a
    tail = _in_triangle(u, v, ((-a * 0.9, 0.0), (-a - tl, b * 1.1), (-a - tl, -b * 1.1)))
    fins = np.zeros_like(body)
    for pos, side, size in spec.fins:
        fu = pos * a
        fv = side * b * np.sqrt(max(1 - pos ** 2, 0.05)) * 0.9
        tip = (fu - size * a * 0.6, fv + side * size * a * 0.9)
        fins |= _in_triangle(u, v, ((fu - size * a * 0.4, fv), (fu + size * a * 0.4, fv), tip))
    sil = body | tail | fins

    img = np.empty((h, w, 3))
    bg = np.array(pose["bg"])
    grad = (ys / h)[..., None] * 0.15
    img[:] = bg + grad
    base = np.array(spec.color) * pose["tone"]
    if spec.texture == "stripes":
        tex = np.sin(2 * np.pi * spec.tex_freq * u / (2 * a))
    elif spec.texture == "spots":
        tex = np.cos(2 * np.pi * spec.tex_freq * u / (2 * a)) * np.cos(2 * np.pi * spec.tex_freq * v / (2 * a))
    else:
        tex = -v / b
    shade = 1.0 + spec.tex_contrast * tex
    body_px = body & ~fins
    img[body_px] = np.clip(base[None, :] * shade[body_px][:, None], 0, 1)
    img[tail & ~body] = np.array(spec.fin_color)
    img[fins] = np.array(spec.fin_color) * 0.9
    eye_u, eye_v = a * 0.7, b * 0.2
    eye = ((u - eye_u) ** 2 + (v - eye_v) ** 2) <= (0.18 * b) ** 2
    img[eye & body] = 0.05

    mask = sil.copy()
    if pose["occluder"] is not None:
        ox, oy, ow, oh = pose["occluder"]
        occ = (np.abs(xs - ox * w) <= ow * w / 2) & (np.abs(ys - oy * h) <= oh * h / 2)
        img[occ] = bg * 0.6 + 0.2
        mask &= ~occ
    cast = pose.get("cast")
    if cast is not None:
        img *= 1.0 + np.asarray(cast)
    if pose.get("haze", 0.0) > 0:
        img = (1 - pose["haze"]) * img + pose["haze"] * np.mean(bg)
    img += rng.normal(0.0, cfg.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    if not cfg.color:
        img = img @ np.array([0.299, 0.587, 0.114])
    return img, mask


def _pose(rng: np.random.Generator, cfg: GenConfig, prev: dict | None) -> dict:
    if prev is None:
        pose = {
            "cx": 0.5 + rng.uniform(-0.05, 0.05),
            "cy": 0.5 + rng.uniform(-0.05, 0.05),
            "angle": np.deg2rad(rng.uniform(-cfg.rotation, cfg.rotation)),
            "scale": rng.uniform(*cfg.scale),
            "flip": bool(rng.random() < cfg.flip_prob),
            "tone": rng.uniform(0.85, 1.1),
            "bg": tuple(rng.uniform(0.05, 0.3, 3)),
        }
        # drawn only when enabled so that other settings keep their streams
        if cfg.color_cast > 0:
            pose["cast"] = tuple(rng.normal(0.0, cfg.color_cast, 3))
        if cfg.haze > 0:
            pose["haze"] = float(rng.uniform(0.0, cfg.haze))
    else:
        lim = np.deg2rad(cfg.rotation)
        pose = dict(prev)
        pose["cx"] = float(np.clip(prev["cx"] + rng.normal(0, 0.01), 0.42, 0.58))
        pose["cy"] = float(np.clip(prev["cy"] + rng.normal(0, 0.01), 0.42, 0.58))
        pose["angle"] = float(np.clip(prev["angle"] + rng.normal(0, np.deg2rad(2)), -lim, lim))
        pose["scale"] = float(np.clip(prev["scale"] * rng.uniform(0.97, 1.03), *cfg.scale))
    pose["occluder"] = None
    if rng.random() < cfg.occlusion_prob:
        pose["occluder"] = (pose["cx"] + rng.uniform(-0.2, 0.2), pose["cy"] + rng.uniform(-0.2, 0.2),
                            rng.uniform(0.08, 0.18), rng.uniform(0.2, 0.5))
    return pose


def _check_fits(spec: SpeciesSpec, cfg: GenConfig) -> None:
    a, b = spec.body
    reach = (a * (1 + 2 * spec.tail) + 0.05) * cfg.scale[1]
    half_w = 0.5 * cfg.width / cfg.height - 0.08 * cfg.width / cfg.height
    if reach > half_w or (b + 0.5 * a) * cfg.scale[1] > 0.42:
        raise ValueError(f"species {spec.name} does not fit the {cfg.width}x{cfg.height} canvas")


def generate(cfg: GenConfig):
    """Yield ``(name, image, mask, species, trajectory_id)`` for the whole dataset."""
    specs = cfg.species_specs()
    for spec in specs:
        _check_fits(spec, cfg)
    root = np.random.SeedSequence(cfg.seed)
    sp_seeds = root.spawn(len(specs))
    traj = 0
    for spec, n, seq in zip(specs, cfg.class_sizes(), sp_seeds):
        rng = np.random.default_rng(seq)
        done = 0
        while done < n:
            length = min(int(rng.integers(cfg.frames[0], cfg.frames[1] + 1)), n - done)
            pose = None
            for _ in range(length):
                pose = _pose(rng, cfg, pose)
                img_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
                img, mask = render(spec, pose, cfg, img_rng)
                if not mask.any():
                    raise ValueError("rendered an empty silhouette")
                yield f"{spec.name}_{done:04d}", img, mask, spec.name, f"t{traj:05d}"
                done += 1
            traj += 1


def gen_dataset(cfg: GenConfig, out_dir: str | Path) -> Path:
    """Write ``images/``, ``masks/`` and ``labels.csv`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for name, img, mask, species, tid in generate(cfg):
        write_image(out / "images" / f"{name}.png", img)
        write_mask(out / "masks" / f"{name}.png", mask)
        rows.append((f"{name}.png", species, tid))
    with open(out / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["filename", "species", "trajectory_id"])
        wr.writerows(rows)
    return out
