"""Diagonal-covariance GMM codebooks and improved Fisher vector encoding."""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsift import DescriptorMatrix
from .errors import BadMagic, DegenerateComponent, DimMismatch, IoError, TooFewDescriptors

VARIANCE_FLOOR = 1e-4
CHUNK_ROWS = 8192
LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    training_meta: dict = field(default_factory=dict, compare=False)

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(self.variances)

    @property
    def fv_dim(self) -> int:
        return 2 * self.K * self.D


@dataclass(frozen=True)
class FisherVector:
    data: np.ndarray
    normalized: bool

    def __len__(self) -> int:
        return len(self.data)


def _as_rows(descriptors) -> np.ndarray:
    if isinstance(descriptors, DescriptorMatrix):
        descriptors = descriptors.descriptors
    return np.asarray(descriptors, dtype=np.float64)


class _LogDensity:
    """Precomputed terms for ``log w_k + log N(x; mu_k, diag(var_k))``."""

    def __init__(self, weights, means, variances):
        self.inv_var = 1.0 / variances
        self.mean_over_var = means * self.inv_var
        self.const = (
            np.log(weights)
            - 0.5 * (np.log(variances).sum(axis=1) + means.shape[1] * LOG_2PI)
            - 0.5 * (means * self.mean_over_var).sum(axis=1)
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.const + x @ self.mean_over_var.T - 0.5 * ((x * x) @ self.inv_var.T)


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _chunk_stats(args):
    x, dens = args
    lp = dens(x)
    lse = _logsumexp_rows(lp)
    gamma = np.exp(lp - lse[:, None])
    return lse.sum(), gamma.sum(axis=0), gamma.T @ x, gamma.T @ (x * x)


def _sufficient_stats(x: np.ndarray, dens: _LogDensity, workers: int = 1):
    """Sum of log-likelihoods and zeroth/first/second order posterior moments.

    Chunks are reduced in ascending order, so the result does not depend on ``workers``.
    """
    chunks = [(x[i : i + CHUNK_ROWS], dens) for i in range(0, len(x), CHUNK_ROWS)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_stats, chunks))
    else:
        parts = [_chunk_stats(c) for c in chunks]
    ll, s0, s1, s2 = parts[0]
    for p in parts[1:]:
        ll = ll + p[0]
        s0 = s0 + p[1]
        s1 = s1 + p[2]
        s2 = s2 + p[3]
    return ll, s0, s1, s2


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns indices of the chosen rows."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    sq = np.einsum("ij,ij->i", x, x)
    d2 = np.maximum(sq - 2 * x @ x[chosen[0]] + sq[chosen[0]], 0)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every remaining point coincides with a centre
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, np.maximum(sq - 2 * x @ x[idx] + sq[idx], 0))
    return np.array(chosen)


def _initial_params(x, k, rng, floor):
    centres = x[kmeans_pp(x, k, rng)]
    # hard assignment to the seeds gives starting weights and spreads
    assign = np.empty(len(x), dtype=np.intp)
    csq = (centres * centres).sum(axis=1)
    for i in range(0, len(x), CHUNK_ROWS):
        xc = x[i : i + CHUNK_ROWS]
        assign[i : i + CHUNK_ROWS] = np.argmin(csq - 2 * xc @ centres.T, axis=1)
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    global_var = np.maximum(x.var(axis=0), floor)
    variances = np.tile(global_var, (k, 1))
    for j in range(k):
        members = x[assign == j]
        if len(members) > 1:
            variances[j] = np.maximum(((members - centres[j]) ** 2).mean(axis=0), floor)
    weights = np.maximum(counts, 1.0)
    return weights / weights.sum(), centres.copy(), variances


def fit_gmm(
    descriptors,
    K: int = 160,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-4,
    variance_floor: float = VARIANCE_FLOOR,
    workers: int = 1,
) -> GmmModel:
    """Fit a diagonal GMM by EM from a seeded k-means++ start.

    Stops when the relative gain in average log-likelihood drops below ``tol``
    or after ``max_iter`` M-steps. ``training_meta["ll_history"]`` holds the
    average log-likelihood before each M-step plus the final value.
    """
    x = _as_rows(descriptors)
    n = len(x)
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K:
        raise TooFewDescriptors(f"{n} descriptors cannot fit {K} components")
    rng = np.random.default_rng(seed)
    weights, means, variances = _initial_params(x, K, rng, variance_floor)
    global_var = np.maximum(x.var(axis=0), variance_floor)

    history: list[float] = []
    reseeded: set[int] = set()
    reseed_at: list[int] = []
    iterations = 0
    converged = False
    while True:
        ll, s0, s1, s2 = _sufficient_stats(x, _LogDensity(weights, means, variances), workers)
        history.append(ll / n)
        if len(history) > 1 and (len(history) - 1) not in reseed_at:
            gain = history[-1] - history[-2]
            if gain < tol * abs(history[-2]):
                converged = True
                break
        if iterations >= max_iter:
            break
        weak = np.flatnonzero(s0 < 1.0)
        for j in weak:
            if j in reseeded:
                raise DegenerateComponent(f"component {j} collapsed again after reseeding")
            reseeded.add(int(j))
        iterations += 1
        safe = np.maximum(s0, np.finfo(float).tiny)
        weights = s0 / n
        means = s1 / safe[:, None]
        variances = np.maximum(s2 / safe[:, None] - means * means, variance_floor)
        if len(weak):
            for j in weak:
                means[j] = x[int(rng.integers(n))]
                variances[j] = global_var
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            reseed_at.append(len(history))
    meta = {
        "descriptor_count": n,
        "iterations": iterations,
        "converged": converged,
        "final_loglik": history[-1],
        "ll_history": history,
        "reseeded_components": sorted(reseeded),
        "seed": seed,
    }
    return GmmModel(weights, means, variances, meta)


def log_posteriors(model: GmmModel, x) -> np.ndarray:
    x = np.atleast_2d(_as_rows(x))
    lp = _LogDensity(model.weights, model.means, model.variances)(x)
    return lp - _logsumexp_rows(lp)[:, None]


def posteriors(model: GmmModel, descriptor) -> np.ndarray:
    """Soft assignment of one descriptor (or rows of descriptors) to the K components."""
    x = _as_rows(descriptor)
    gamma = np.exp(log_posteriors(model, x))
    return gamma[0] if x.ndim == 1 else gamma


def average_loglik(model: GmmModel, x) -> float:
    x = np.atleast_2d(_as_rows(x))
    lp = _LogDensity(model.weights, model.means, model.variances)(x)
    return float(_logsumexp_rows(lp).mean())


def signed_sqrt(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.sqrt(np.abs(v))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else np.zeros_like(v)


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Row permutation that sorts rows by their raw bytes; ties keep relative order."""
    if len(x) < 2:
        return np.arange(len(x))
    x = np.ascontiguousarray(x)
    keys = x.view(np.dtype((np.void, x.dtype.itemsize * x.shape[1]))).ravel()
    return np.argsort(keys, kind="stable")


def encode_ifv(model: GmmModel, descriptors, normalize: bool = True) -> FisherVector:
    """Improved Fisher vector: mean block (K*D) then standard-deviation block (K*D).

    Gradients are averaged over descriptors and scaled by ``1/sqrt(w_k)`` (means) and
    ``1/sqrt(2 w_k)`` (deviations). With ``normalize`` the result is signed-square-rooted
    and L2-normalised. Descriptors are accumulated in a canonical order, so any
    permutation of the input gives the same bits.
    """
    x = _as_rows(descriptors)
    if x.ndim != 2 or (x.size and x.shape[1] != model.D):
        raise DimMismatch(f"descriptor dim {x.shape[-1]} != model dim {model.D}")
    if len(x) == 0:
        return FisherVector(np.zeros(model.fv_dim), normalized=True)
    x = x[canonical_order(x)]
    n = len(x)
    _, s0, s1, s2 = _sufficient_stats(x, _LogDensity(model.weights, model.means, model.variances))
    mu = model.means
    sigma = model.sigmas
    w = model.weights[:, None]
    g_mean = (s1 - s0[:, None] * mu) / sigma / (n * np.sqrt(w))
    centred_sq = s2 - 2 * mu * s1 + s0[:, None] * mu * mu
    g_sigma = (centred_sq / model.variances - s0[:, None]) / (n * np.sqrt(2 * w))
    fv = np.concatenate([g_mean.ravel(), g_sigma.ravel()])
    if not normalize:
        return FisherVector(fv, normalized=False)
    return FisherVector(l2_normalize(signed_sqrt(fv)), normalized=True)


def sample_pool(sets: Sequence, max_size: int | None, seed: int) -> np.ndarray:
    """Uniform seeded subsample of at most ``max_size`` rows across descriptor sets."""
    arrays = [_as_rows(s) for s in sets]
    arrays = [a for a in arrays if len(a)]
    if not arrays:
        return np.zeros((0, 0))
    total = sum(len(a) for a in arrays)
    if max_size is None or total <= max_size:
        return np.concatenate(arrays)
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(total, size=max_size, replace=False))
    offsets = np.cumsum([0] + [len(a) for a in arrays])
    out = np.empty((max_size, arrays[0].shape[1]))
    for j, a in enumerate(arrays):
        lo, hi = np.searchsorted(pick, [offsets[j], offsets[j + 1]])
        out[lo:hi] = a[pick[lo:hi] - offsets[j]]
    return out


_GMM_MAGIC = b"GMM1"


def save_gmm(model: GmmModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(_GMM_MAGIC)
        fh.write(struct.pack("<II", model.K, model.D))
        for arr in (model.weights, model.means, model.variances):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_gmm(path: str | os.PathLike) -> GmmModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != _GMM_MAGIC:
        raise BadMagic(f"{path}: expected GMM1 header")
    k, d = struct.unpack_from("<II", raw, 4)
    expected = 12 + 8 * (k + 2 * k * d)
    if len(raw) != expected:
        raise IoError(f"{path}: expected {expected} bytes, found {len(raw)}")
    vals = np.frombuffer(raw, dtype="<f8", offset=12).astype(np.float64)
    weights = vals[:k]
    means = vals[k : k + k * d].reshape(k, d)
    variances = vals[k + k * d :].reshape(k, d)
    return GmmModel(weights, means, variances, {})
