"""Dominant colours of a clothing image as named CIELAB clusters.

Conversions use sRGB primaries with a D65 white; matrix constants are the
4-decimal values below and the white point is their row sum, so sRGB white maps
to exactly L=100, a=b=0.

Palette anchors (sRGB):

    red (255, 0, 0)      orange (255, 128, 0)   yellow (255, 255, 0)
    green (0, 160, 0)    cyan (0, 255, 255)     blue (0, 0, 255)
    purple (128, 0, 128) pink (255, 128, 192)   white (255, 255, 255)
    gray (128, 128, 128) black (0, 0, 0)
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyRaster

SRGB_TO_XYZ = np.array([
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
])
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
WHITE_D65 = SRGB_TO_XYZ.sum(axis=1)

PALETTE = {
    "red": (255, 0, 0),
    "orange": (255, 128, 0),
    "yellow": (255, 255, 0),
    "green": (0, 160, 0),
    "cyan": (0, 255, 255),
    "blue": (0, 0, 255),
    "purple": (128, 0, 128),
    "pink": (255, 128, 192),
    "white": (255, 255, 255),
    "gray": (128, 128, 128),
    "black": (0, 0, 0),
}
MIN_PROPORTION = 0.05
MAX_ITER = 50

_EPS = (6 / 29) ** 3
_KAPPA = 3 * (6 / 29) ** 2


def srgb_to_lab(rgb) -> np.ndarray:
    """sRGB in [0, 255] (..., 3) to CIELAB (..., 3)."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    t = (lin @ SRGB_TO_XYZ.T) / WHITE_D65
    f = np.where(t > _EPS, np.cbrt(t), t / _KAPPA + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb(lab) -> np.ndarray:
    """CIELAB to sRGB in [0, 255] (float, clipped to gamut)."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    f = np.stack([fy + lab[..., 1] / 500, fy, fy - lab[..., 2] / 200], axis=-1)
    t = np.where(f > 6 / 29, f**3, _KAPPA * (f - 4 / 29))
    lin = (t * WHITE_D65) @ XYZ_TO_SRGB.T
    lin = np.clip(lin, 0.0, 1.0)
    c = np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * lin ** (1 / 2.4) - 0.055)
    return np.clip(c * 255.0, 0.0, 255.0)


_PALETTE_NAMES = tuple(PALETTE)
_PALETTE_LAB = srgb_to_lab(np.array([PALETTE[n] for n in _PALETTE_NAMES]))


def palette_name(lab) -> str:
    """Nearest palette anchor by CIELAB distance."""
    d = np.linalg.norm(_PALETTE_LAB - np.asarray(lab, dtype=np.float64), axis=1)
    return _PALETTE_NAMES[int(np.argmin(d))]


@dataclass(frozen=True)
class ColorEntry:
    name: str
    rgb: tuple[float, float, float]
    proportion: float
    lab: tuple[float, float, float]


@dataclass(frozen=True)
class ColorReport:
    entries: tuple[ColorEntry, ...]
    image_id: int | None = None

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "colors": [
                {"name": e.name, "rgb": [int(round(v)) for v in e.rgb], "proportion": round(e.proportion, 6)}
                for e in self.entries
            ],
            "palette": "11-name assumed palette: " + ",".join(_PALETTE_NAMES),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


def _weighted_kmeans_pp(points, weights, k, rng):
    chosen = [int(rng.choice(len(points), p=weights / weights.sum()))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        p = weights * d2
        if p.sum() <= 0:
            break
        idx = int(rng.choice(len(points), p=p / p.sum()))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def _assign(points, centres):
    d = ((points[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


def dominant_colors(
    rgb,
    k: int = 5,
    seed: int = 0,
    min_proportion: float = MIN_PROPORTION,
    max_iter: int = MAX_ITER,
    image_id: int | None = None,
) -> ColorReport:
    """Cluster pixels in CIELAB and report up to ``k`` named colours with proportions.

    Pixels are reduced to their distinct colours with counts, so the result does
    not depend on pixel order. Clusters smaller than ``min_proportion`` are merged,
    smallest first, into the nearest other cluster.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    px = np.asarray(rgb)
    if px.size == 0:
        raise EmptyRaster("raster has no pixels")
    px = px.reshape(-1, 3).astype(np.uint8)
    colours, counts = np.unique(px, axis=0, return_counts=True)
    weights = counts.astype(np.float64)
    lab = srgb_to_lab(colours)
    rng = np.random.default_rng(seed)

    centres = _weighted_kmeans_pp(lab, weights, min(k, len(colours)), rng)
    assign = _assign(lab, centres)
    for _ in range(max_iter):
        for j in range(len(centres)):
            m = assign == j
            if m.any():
                centres[j] = np.average(lab[m], axis=0, weights=weights[m])
        new = _assign(lab, centres)
        if np.array_equal(new, assign):
            break
        assign = new

    mass = np.bincount(assign, weights=weights, minlength=len(centres))
    sums = np.zeros_like(centres)
    np.add.at(sums, assign, lab * weights[:, None])
    clusters = [(mass[j], sums[j]) for j in range(len(centres)) if mass[j] > 0]

    total = weights.sum()
    while len(clusters) > 1:
        small = min(range(len(clusters)), key=lambda j: (clusters[j][0], j))
        if clusters[small][0] / total >= min_proportion:
            break
        m_s, s_s = clusters.pop(small)
        c_s = s_s / m_s
        target = min(
            range(len(clusters)),
            key=lambda j: (np.linalg.norm(clusters[j][1] / clusters[j][0] - c_s), j),
        )
        m_t, s_t = clusters[target]
        clusters[target] = (m_t + m_s, s_t + s_s)

    entries = []
    for m_j, s_j in clusters:
        c_lab = s_j / m_j
        entries.append(
            ColorEntry(
                name=palette_name(c_lab),
                rgb=tuple(float(v) for v in lab_to_srgb(c_lab)),
                proportion=float(m_j / total),
                lab=tuple(float(v) for v in c_lab),
            )
        )
    entries.sort(key=lambda e: (-e.proportion, e.name, e.lab))
    return ColorReport(tuple(entries), image_id)
