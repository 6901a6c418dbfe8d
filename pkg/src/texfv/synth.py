"""Procedural clothing-texture images laid out like the reference capture grid.

Each article gets a seeded base pattern drawn from a palette shared by every
class, so colour alone says little about the texture. Every article is rendered
under 16 configurations: azimuth (pattern rotation 90 or 45 degrees), distance
(pattern scale x1 or x0.42), inclination (affine shear) and tension (sinusoidal
warp). A radial illumination falloff and Gaussian sensor noise are applied last.
"""

from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .color import palette_name, srgb_to_lab
from .dataset import ImageRecord, Manifest, Tension, label_id, write_manifest
from .errors import UnrenderableConfig

SYNTH_CLASSES = ("Checked", "Striped", "Polka-dotted", "Zigzagged", "None")

# shared fabric palette (sRGB); every class draws from all of it
FABRIC_PALETTE = (
    (32, 42, 110),
    (236, 234, 226),
    (178, 34, 44),
    (28, 28, 30),
    (128, 128, 124),
    (224, 190, 64),
    (46, 110, 62),
    (222, 150, 168),
)

NOISE_SIGMA = 0.02
FALLOFF = 0.25
GRAIN = 0.05
SUPERSAMPLE = 2

AZIMUTHS = (90.0, 45.0)
DISTANCES = (5.0, 12.0)  # cm; pattern scale is DISTANCES[0] / distance
SCALES = (1.0, 0.42)
INCLINATIONS = (90.0, 60.0)  # deg; 60 is rendered as a shear
SHEAR = 0.3
TENSIONS = (Tension.TAUT, Tension.HANGING)
BASE_PPCM = 128.0
LIGHTING = 200


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple[str, ...] = SYNTH_CLASSES
    articles_per_class: int = 6
    configs_per_article: int = 16
    image_size: int = 256
    seed: int = 42
    noise_sigma: float = NOISE_SIGMA
    falloff: float = FALLOFF
    grain: float = GRAIN
    # pattern periods as fractions of the image side
    period_range: tuple[float, float] = (0.08, 0.2)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("classes must be nonempty")
        bad = [c for c in self.classes if c not in SYNTH_CLASSES]
        if bad:
            raise ValueError(f"cannot synthesize {bad}; choose from {SYNTH_CLASSES}")
        if self.image_size < 128:
            raise ValueError("image_size must be >= 128")
        if not 1 <= self.configs_per_article <= 16:
            raise ValueError("configs_per_article must be in 1..16")
        if self.articles_per_class < 1:
            raise ValueError("articles_per_class must be >= 1")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "SynthSpec":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synth spec keys: {sorted(unknown)}")
        for key in ("classes", "period_range"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)


@dataclass(frozen=True)
class Config:
    index: int
    azimuth_deg: float
    distance_cm: float
    scale: float
    inclination_deg: float
    tension: Tension


def configurations() -> tuple[Config, ...]:
    """The 16 capture configurations in a fixed order."""
    out = []
    for i, (az, d, inc, t) in enumerate(itertools.product(AZIMUTHS, range(2), INCLINATIONS, TENSIONS)):
        out.append(Config(i, az, DISTANCES[d], SCALES[d], inc, t))
    return tuple(out)


@dataclass(frozen=True)
class Article:
    texture: str
    fg: tuple[int, int, int]
    bg: tuple[int, int, int]
    angle: float  # radians
    period: float  # pixels at scale x1
    params: dict = field(default_factory=dict)


def make_article(texture: str, rng: np.random.Generator, size: int, period_range=(0.08, 0.2)) -> Article:
    i, j = rng.choice(len(FABRIC_PALETTE), 2, replace=False)
    fg, bg = FABRIC_PALETTE[i], FABRIC_PALETTE[j]
    angle = float(rng.uniform(0, np.pi))
    period = float(rng.uniform(*period_range) * size)
    params = {}
    if texture == "Striped":
        params["duty"] = float(rng.uniform(0.3, 0.7))
    elif texture == "Checked":
        params["duty"] = float(rng.uniform(0.4, 0.6))
    elif texture == "Polka-dotted":
        params["radius"] = float(rng.uniform(0.18, 0.32) * period)
        params["stagger"] = bool(rng.random() < 0.5)
    elif texture == "Zigzagged":
        params["duty"] = float(rng.uniform(0.35, 0.65))
        params["wavelength"] = float(rng.uniform(1.0, 2.0) * period)
        params["amplitude"] = float(rng.uniform(0.5, 1.0) * period)
    elif texture == "None":
        bg = fg
        period = 0.0
    return Article(texture, fg, bg, angle, period, params)


def _frac(v):
    return v - np.floor(v)


def pattern_mask(article: Article, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Foreground coverage in {0, 1} at pattern coordinates (u, v)."""
    p = article.period
    t = article.texture
    if t == "None":
        return np.zeros_like(u)
    if t == "Striped":
        return (_frac(u / p) < article.params["duty"]).astype(np.float64)
    if t == "Checked":
        d = article.params["duty"]
        return ((_frac(u / p) < d) ^ (_frac(v / p) < d)).astype(np.float64)
    if t == "Polka-dotted":
        row = np.floor(v / p)
        shift = 0.5 * (row % 2) if article.params["stagger"] else 0.0
        du = (_frac(u / p + shift) - 0.5) * p
        dv = (_frac(v / p) - 0.5) * p
        return (du * du + dv * dv < article.params["radius"] ** 2).astype(np.float64)
    if t == "Zigzagged":
        lam = article.params["wavelength"]
        tri = 2.0 * np.abs(_frac(v / lam) - 0.5)  # triangle wave in [0, 1]
        return (_frac((u - article.params["amplitude"] * tri) / p) < article.params["duty"]).astype(np.float64)
    raise ValueError(f"unknown texture {t!r}")


def render(
    article: Article,
    config: Config,
    size: int,
    rng: np.random.Generator,
    noise_sigma: float = NOISE_SIGMA,
    falloff: float = FALLOFF,
    grain: float = GRAIN,
) -> np.ndarray:
    """Render one configuration of an article as an RGB uint8 image."""
    if article.period * config.scale > size:
        raise UnrenderableConfig(
            f"{article.texture} period {article.period * config.scale:.1f}px exceeds image size {size}"
        )
    n = size * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / SUPERSAMPLE - size / 2
    y, x = np.meshgrid(c, c, indexing="ij")
    if config.tension is Tension.HANGING:
        a, wl = 0.03 * size, 0.45 * size
        x, y = x + a * np.sin(2 * np.pi * y / wl), y + 0.5 * a * np.sin(2 * np.pi * x / wl)
    if config.inclination_deg != 90.0:
        x = x + SHEAR * y
    theta = article.angle + np.deg2rad(config.azimuth_deg - 90.0)
    ct, st = np.cos(theta), np.sin(theta)
    u = (ct * x + st * y) / config.scale
    v = (-st * x + ct * y) / config.scale

    m = pattern_mask(article, u, v)
    m = m.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    fg = np.asarray(article.fg, dtype=np.float64) / 255
    bg = np.asarray(article.bg, dtype=np.float64) / 255
    img = m[..., None] * fg + (1 - m[..., None]) * bg

    if article.texture == "None" and grain > 0:
        g = rng.normal(0.0, 1.0, (size + 2, size + 2))
        g = sum(g[i : i + size, j : j + size] for i in range(3) for j in range(3)) / 3.0
        img = img * (1 + grain * g[..., None])
    if falloff > 0:
        yy, xx = np.meshgrid(np.arange(size) + 0.5 - size / 2, np.arange(size) + 0.5 - size / 2, indexing="ij")
        r2 = (xx * xx + yy * yy) / (2 * (size / 2) ** 2)
        img = img * (1 - falloff * r2)[..., None]
    if noise_sigma > 0:
        img = img + rng.normal(0.0, noise_sigma, img.shape)
    return np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)


def image_relpath(texture: str, article: int, config: int) -> str:
    slug = texture.lower().replace("-", "")
    return f"images/{slug}/a{article:02d}_c{config:02d}.png"


def generate(spec: SynthSpec, out_dir: str | os.PathLike) -> Manifest:
    """Render every (class, article, configuration) and write PNGs plus ``manifest.csv``."""
    out = Path(out_dir)
    configs = configurations()[: spec.configs_per_article]
    records = []
    image_id = 0
    for texture in spec.classes:
        lab = label_id(texture)
        for a in range(spec.articles_per_class):
            art_rng = np.random.default_rng([spec.seed, lab, a])
            article = make_article(texture, art_rng, spec.image_size, spec.period_range)
            names = tuple(dict.fromkeys(palette_name(srgb_to_lab(c)) for c in (article.bg, article.fg)))
            for cfg in configs:
                rng = np.random.default_rng([spec.seed, lab, a, cfg.index])
                img = render(article, cfg, spec.image_size, rng, spec.noise_sigma, spec.falloff, spec.grain)
                rel = image_relpath(texture, a, cfg.index)
                path = out / rel
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.fromarray(img).save(path, format="PNG")
                records.append(
                    ImageRecord(
                        image_id=image_id,
                        label_id=lab,
                        distance_cm=cfg.distance_cm,
                        inclination_deg=cfg.inclination_deg,
                        azimuth_deg=cfg.azimuth_deg,
                        scale_ppcm=BASE_PPCM * cfg.scale,
                        lighting=LIGHTING,
                        tension=cfg.tension,
                        notes=f"synthetic article {a} config {cfg.index}",
                        colors=names,
                        image_path=path,
                    )
                )
                image_id += 1
    manifest = Manifest.from_records(records)
    write_manifest(manifest, out / "manifest.csv")
    (out / "synth_spec.json").write_text(spec.to_json() + "\n")
    return manifest
