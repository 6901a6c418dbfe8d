"""Flat ``key = value`` run configuration shared by every subcommand.

Unknown keys are fatal. Resolution order: field default, then ``TEXFV_WORKERS``
(for ``workers`` only), then the config file, then command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dsift import DsiftParams, default_scales
from .embed import EMBED_DIM, FeatureSet
from .errors import UnknownConfigKey
from .evaluation import ALL_FEATURE_SETS, DEFAULT_FRACTIONS, EvalConfig
from .synth import SYNTH_CLASSES, SynthSpec

WORKERS_ENV = "TEXFV_WORKERS"


def _doc(text: str, **kw):
    return field(metadata={"help": text}, **kw)


@dataclass(frozen=True)
class RunConfig:
    seed: int = _doc("master seed for splits, subsampling, GMM, SVM and synthesis", default=0)
    workers: int = _doc(f"parallel workers for every parallel section (env {WORKERS_ENV})", default=1)
    # dense SIFT
    num_orientations: int = _doc("orientation bins per cell", default=8)
    spatial_bins: int = _doc("cells per axis", default=4)
    bin_size_px: int = _doc("cell side in pixels", default=6)
    step_px: int = _doc("grid stride in pixels", default=4)
    scales: tuple = _doc("resize factors, comma separated", default=default_scales())
    clamp_threshold: float = _doc("descriptor clamp before re-normalisation", default=0.2)
    max_descriptors: int = _doc("per-image descriptor cap for encoding, 0 keeps all", default=2000)
    # Fisher encoding
    K: int = _doc("GMM components", default=160)
    gmm_pool: int = _doc("max descriptors in the GMM training pool", default=200000)
    gmm_max_iter: int = _doc("EM iteration cap", default=100)
    gmm_tol: float = _doc("EM relative log-likelihood tolerance", default=1e-4)
    # embeddings
    embeddings: str = _doc("EMB1 or CSV embedding file; empty uses the stand-in projection", default="")
    embedding_dim: int = _doc("stand-in embedding length", default=EMBED_DIM)
    # SVM
    lam: float | None = _doc("SVM regularisation; 'auto' means 1/n", default=None)
    gap_tol: float = _doc("SDCA duality-gap tolerance", default=1e-3)
    max_epochs: int = _doc("SDCA epoch cap", default=200)
    # evaluation and training
    fractions: tuple = _doc("training fractions, comma separated", default=DEFAULT_FRACTIONS)
    folds: int = _doc("random splits per fraction", default=40)
    feature_sets: tuple = _doc("evaluated feature sets: embedding, ifv, fused",
                               default=tuple(f.value for f in ALL_FEATURE_SETS))
    shared_gmm: bool = _doc("fit one GMM on all images instead of per fold", default=False)
    feature_set: str = _doc("feature set used by train/classify", default=FeatureSet.FUSED.value)
    train_fraction: float = _doc("training fraction used by train", default=0.8)
    # colour
    color_k: int = _doc("k-means clusters for dominant colours", default=5)
    min_proportion: float = _doc("clusters below this share are merged", default=0.05)
    # synthesis
    synth_classes: tuple = _doc("textures to synthesise", default=SYNTH_CLASSES)
    articles_per_class: int = _doc("synthetic articles per class", default=6)
    configs_per_article: int = _doc("capture configurations per article (max 16)", default=16)
    image_size: int = _doc("synthetic image side in pixels", default=256)
    noise_sigma: float = _doc("synthetic sensor noise", default=0.02)
    falloff: float = _doc("synthetic illumination falloff", default=0.25)
    grain: float = _doc("film grain on plain articles", default=0.05)

    def __post_init__(self):
        FeatureSet.parse(self.feature_set)
        for fs in self.feature_sets:
            FeatureSet.parse(fs)

    # --- derived module configs ---

    def dsift_params(self) -> DsiftParams:
        return DsiftParams(self.num_orientations, self.spatial_bins, self.bin_size_px, self.step_px,
                           self.scales, self.clamp_threshold)

    def descriptor_cap(self) -> int | None:
        return self.max_descriptors or None

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            fractions=self.fractions, folds=self.folds, feature_sets=self.feature_sets, seed=self.seed, K=self.K,
            gmm_pool=self.gmm_pool, gmm_max_iter=self.gmm_max_iter, gmm_tol=self.gmm_tol, lam=self.lam,
            gap_tol=self.gap_tol, max_epochs=self.max_epochs, shared_gmm=self.shared_gmm, workers=self.workers,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(classes=self.synth_classes, articles_per_class=self.articles_per_class,
                         configs_per_article=self.configs_per_article, image_size=self.image_size, seed=self.seed,
                         noise_sigma=self.noise_sigma, falloff=self.falloff, grain=self.grain)

    # --- text form ---

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.as_dict().items())

    def with_overrides(self, values: dict) -> "RunConfig":
        return replace(self, **parse_values(values))


def format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TUPLE_ITEM = {"scales": float, "fractions": float, "feature_sets": str, "synth_classes": str}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    """Convert the text form of ``key`` to its typed value."""
    if key not in _FIELDS:
        raise UnknownConfigKey(f"unknown config key {key!r}")
    text = text.strip()
    default = _FIELDS[key].default
    try:
        if key == "lam":
            return None if text.lower() in ("", "auto") else float(text)
        if key in _TUPLE_ITEM:
            return tuple(_TUPLE_ITEM[key](p.strip()) for p in text.split(",") if p.strip())
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ValueError(f"config key {key!r}: {exc}") from None


def parse_values(values: dict) -> dict:
    return {k: parse_value(k, v) if isinstance(v, str) else v for k, v in values.items()}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment. Returns typed values."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source} line {n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _FIELDS:
            raise UnknownConfigKey(f"unknown config key {key!r} ({source} line {n})")
        out[key] = parse_value(key, value)
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict | None = None,
                base: RunConfig | None = None) -> RunConfig:
    """Resolve defaults, environment, file and overrides into one ``RunConfig``."""
    cfg = base or RunConfig()
    env = os.environ.get(WORKERS_ENV)
    if env and base is None:
        cfg = replace(cfg, workers=parse_value("workers", env))
    if path is not None:
        p = Path(path)
        cfg = replace(cfg, **parse_config_text(p.read_text(), str(p)))
    if overrides:
        cfg = replace(cfg, **parse_values(overrides))
    return cfg


def config_keys() -> list[tuple[str, object, str]]:
    """(key, default, help) for every tunable."""
    return [(f.name, f.default, f.metadata.get("help", "")) for f in fields(RunConfig)]
