"""Multi-scale dense SIFT.

Descriptor layout: dimension index ``(cell_row * spatial_bins + cell_col) * num_orientations + orientation``.
Orientation bins start at angle 0 (``atan2(d/drow, d/dcol)``) and span ``2*pi/num_orientations`` each.
Each grid point is the top-left corner of a ``spatial_bins * bin_size_px`` square support; only
points whose full support lies inside the raster are used.
"""

from __future__ import annotations

import math
import os
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AllScalesSkipped, BadMagic, DegenerateOutput, IoError, RasterTooSmall


def default_scales(lo: float = 0.125, hi: float = 3.0, n: int = 10) -> tuple[float, ...]:
    """``n`` geometrically spaced scales from ``lo`` to ``hi`` inclusive."""
    if n == 1:
        return (float(lo),)
    return tuple(float(s) for s in np.geomspace(lo, hi, n))


@dataclass(frozen=True)
class DsiftParams:
    num_orientations: int = 8
    spatial_bins: int = 4
    bin_size_px: int = 6
    step_px: int = 4
    scales: tuple[float, ...] = field(default_factory=default_scales)
    clamp_threshold: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be non-empty and positive")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError("scales must be strictly increasing")
        if min(self.num_orientations, self.spatial_bins, self.bin_size_px, self.step_px) < 1:
            raise ValueError("orientation/bin/step sizes must be >= 1")

    @property
    def dim(self) -> int:
        return self.num_orientations * self.spatial_bins**2

    @property
    def support_px(self) -> int:
        return self.spatial_bins * self.bin_size_px


@dataclass(frozen=True)
class DescriptorMatrix:
    """A set of descriptors.

    ``descriptors`` is (count, dim); ``data`` is the dim x count view.
    ``scale_of[i]`` indexes the scale list the descriptor was taken at.
    """

    descriptors: np.ndarray
    scale_of: np.ndarray
    skipped_scales: tuple[float, ...] = ()

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def count(self) -> int:
        return self.descriptors.shape[0]

    @property
    def data(self) -> np.ndarray:
        return self.descriptors.T

    @classmethod
    def empty(cls, dim: int = 128) -> "DescriptorMatrix":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.uint8))

    def subset(self, idx: np.ndarray) -> "DescriptorMatrix":
        return DescriptorMatrix(self.descriptors[idx], self.scale_of[idx], self.skipped_scales)


def output_shape(shape: tuple[int, int], factor: float) -> tuple[int, int]:
    return max(1, int(round(shape[0] * factor))), max(1, int(round(shape[1] * factor)))


def bilinear_sample(raster: np.ndarray, y: np.ndarray | float, x: np.ndarray | float) -> np.ndarray:
    """Sample ``raster`` at continuous pixel coordinates (pixel centres at integers), edge-clamped."""
    h, w = raster.shape
    y = np.clip(np.asarray(y, dtype=np.float64), 0, h - 1)
    x = np.clip(np.asarray(x, dtype=np.float64), 0, w - 1)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    top = raster[y0, x0] * (1 - fx) + raster[y0, x1] * fx
    bot = raster[y1, x0] * (1 - fx) + raster[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _axis_taps(n_in: int, n_out: int, factor: float):
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(raster: np.ndarray, factor: float, min_size: int = 1) -> np.ndarray:
    """Bilinear resize by ``factor`` using half-pixel-centre alignment.

    Raises DegenerateOutput when either output side would be below ``min_size``.
    """
    if not factor > 0:
        raise ValueError(f"factor must be positive, got {factor}")
    raster = np.asarray(raster, dtype=np.float64)
    h, w = raster.shape
    oh, ow = int(round(h * factor)), int(round(w * factor))
    if min(oh, ow) < max(1, min_size):
        raise DegenerateOutput(f"{h}x{w} raster at scale {factor:g} gives {oh}x{ow} < {min_size}")
    if factor == 1.0:
        return raster.copy()
    ylo, yhi, fy = _axis_taps(h, oh, factor)
    xlo, xhi, fx = _axis_taps(w, ow, factor)
    rows = raster[ylo] * (1 - fy)[:, None] + raster[yhi] * fy[:, None]
    return rows[:, xlo] * (1 - fx) + rows[:, xhi] * fx


def grid_size(shape: tuple[int, int], params: DsiftParams) -> tuple[int, int]:
    s = params.support_px
    h, w = shape
    if h < s or w < s:
        return 0, 0
    return (h - s) // params.step_px + 1, (w - s) // params.step_px + 1


def expected_count(shape: tuple[int, int], params: DsiftParams) -> int:
    """Closed-form descriptor count of :func:`extract_dsift_multiscale` for a raster shape."""
    total = 0
    for s in params.scales:
        ny, nx = grid_size(output_shape(shape, s), params)
        total += ny * nx
    return total


def spatial_weights(params: DsiftParams) -> np.ndarray:
    """(spatial_bins, support_px) bilinear cell weights, flat window."""
    b = params.bin_size_px
    d = np.arange(params.support_px, dtype=np.float64)
    centres = (np.arange(params.spatial_bins) + 0.5) * b - 0.5
    return np.maximum(0.0, 1.0 - np.abs(d[None, :] - centres[:, None]) / b)


def orientation_maps(raster: np.ndarray, num_orientations: int) -> np.ndarray:
    """Gradient magnitude split over orientation bins with linear interpolation: (n, H, W)."""
    gy, gx = np.gradient(raster)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    t = theta * (num_orientations / (2 * np.pi))
    lo = np.floor(t)
    frac = t - lo
    b0 = lo.astype(np.intp) % num_orientations
    b1 = (b0 + 1) % num_orientations
    out = np.zeros((num_orientations, raster.size))
    pix = np.arange(raster.size)
    out[b0.ravel(), pix] = (mag * (1 - frac)).ravel()
    # b1 != b0 whenever there is more than one bin, so this never overwrites
    out[b1.ravel(), pix] += (mag * frac).ravel()
    return out.reshape((num_orientations,) + raster.shape)


def normalize_descriptors(desc: np.ndarray, clamp: float) -> np.ndarray:
    """L2-normalise rows, clamp at ``clamp``, renormalise. Zero rows stay zero."""
    desc = np.array(desc, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", desc, desc))
    nz = norms > 0
    desc[nz] /= norms[nz, None]
    np.minimum(desc, clamp, out=desc)
    norms = np.sqrt(np.einsum("ij,ij->i", desc, desc))
    nz = norms > 0
    desc[nz] /= norms[nz, None]
    return desc


def extract_dsift_single(raster: np.ndarray, params: DsiftParams = DsiftParams()) -> DescriptorMatrix:
    """Dense SIFT on one raster, grid points in row-major order."""
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim != 2:
        raise ValueError("raster must be 2-D grayscale")
    ny, nx = grid_size(raster.shape, params)
    if ny == 0:
        raise RasterTooSmall(f"raster {raster.shape} smaller than support {params.support_px}px")
    n = params.num_orientations
    nb = params.spatial_bins
    s = params.support_px
    step = params.step_px
    wts = spatial_weights(params)
    omaps = orientation_maps(raster, n)
    hist = np.empty((ny, nx, nb, nb, n))
    for o in range(n):
        # columns: (H, nx, s) windows -> (H, nx, nb) cell sums
        win_x = sliding_window_view(omaps[o], s, axis=1)[:, ::step][:, :nx]
        tx = win_x @ wts.T
        # rows: (nx, nb, ny, s) windows -> (nx, nb_x, ny, nb_y)
        win_y = sliding_window_view(tx.transpose(1, 2, 0), s, axis=2)[:, :, ::step][:, :, :ny]
        txy = win_y @ wts.T
        hist[..., o] = txy.transpose(2, 0, 3, 1)
    desc = normalize_descriptors(hist.reshape(ny * nx, params.dim), params.clamp_threshold)
    return DescriptorMatrix(desc, np.zeros(len(desc), dtype=np.uint8))


def extract_dsift_multiscale(raster: np.ndarray, params: DsiftParams = DsiftParams()) -> DescriptorMatrix:
    """Concatenate single-scale DSIFT over ``params.scales`` in ascending order.

    Scales whose resized raster cannot hold one support region are skipped and
    listed in ``skipped_scales``.
    """
    parts, scale_idx, skipped = [], [], []
    for i, s in enumerate(params.scales):
        try:
            resized = resize_bilinear(raster, s, min_size=params.support_px)
        except DegenerateOutput:
            skipped.append(s)
            continue
        dm = extract_dsift_single(resized, params)
        parts.append(dm.descriptors)
        scale_idx.append(np.full(dm.count, i, dtype=np.uint8))
    if not parts:
        raise AllScalesSkipped(f"raster {np.shape(raster)} too small at every scale")
    return DescriptorMatrix(np.concatenate(parts), np.concatenate(scale_idx), tuple(skipped))


# --- serialization -----------------------------------------------------------

_DSF_MAGIC = b"DSF1"


def save_descriptors(dm: DescriptorMatrix, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(_DSF_MAGIC)
        fh.write(struct.pack("<IQ", dm.dim, dm.count))
        fh.write(np.ascontiguousarray(dm.descriptors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dm.scale_of, dtype=np.uint8).tobytes())


def load_descriptors(path: str | os.PathLike) -> DescriptorMatrix:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != _DSF_MAGIC:
        raise BadMagic(f"{path}: expected DSF1 header")
    dim, count = struct.unpack_from("<IQ", raw, 4)
    off = 16
    nbytes = dim * count * 4
    if len(raw) != off + nbytes + count:
        raise IoError(f"{path}: truncated descriptor file")
    desc = np.frombuffer(raw, dtype="<f4", count=dim * count, offset=off).reshape(count, dim)
    scale_of = np.frombuffer(raw, dtype=np.uint8, count=count, offset=off + nbytes)
    return DescriptorMatrix(desc.astype(np.float32), scale_of.copy())


# --- batch extraction --------------------------------------------------------


@dataclass(frozen=True)
class ExtractResult:
    """Per-image extraction output.

    ``mean_descriptor`` pools every extracted descriptor; ``descriptors`` may be
    a seeded uniform subsample of at most ``max_descriptors``.
    """

    image_id: int
    descriptors: DescriptorMatrix
    mean_descriptor: np.ndarray
    total_count: int
    elapsed_ms: float


def subsample_indices(count: int, cap: int | None, seed: int, image_id: int) -> np.ndarray | None:
    if cap is None or count <= cap:
        return None
    rng = np.random.default_rng([seed, image_id])
    return np.sort(rng.choice(count, size=cap, replace=False))


def _extract_one(job) -> ExtractResult:
    from .dataset import load_image

    image_id, path, params, cap, seed = job
    t0 = time.perf_counter()
    gray, _ = load_image(path)
    dm = extract_dsift_multiscale(gray, params)
    mean = dm.descriptors.mean(axis=0)
    idx = subsample_indices(dm.count, cap, seed, image_id)
    kept = dm if idx is None else dm.subset(idx)
    kept = DescriptorMatrix(kept.descriptors.astype(np.float32), kept.scale_of, kept.skipped_scales)
    return ExtractResult(image_id, kept, mean, dm.count, (time.perf_counter() - t0) * 1e3)


def extract_batch(
    items: Sequence[tuple[int, str | os.PathLike]],
    params: DsiftParams = DsiftParams(),
    workers: int = 1,
    max_descriptors: int | None = None,
    seed: int = 0,
) -> list[ExtractResult]:
    """Extract DSIFT for ``(image_id, path)`` pairs, results in input order.

    Output is identical for any worker count: every image is processed
    independently and subsampling is seeded by ``(seed, image_id)``.
    """
    jobs = [(int(i), str(p), params, max_descriptors, seed) for i, p in items]
    if workers <= 1 or len(jobs) <= 1:
        return [_extract_one(j) for j in jobs]
    chunk = max(1, math.ceil(len(jobs) / (workers * 4)))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_extract_one, jobs, chunksize=chunk))
