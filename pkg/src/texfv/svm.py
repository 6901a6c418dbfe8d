"""One-vs-rest linear SVM trained by stochastic dual coordinate ascent.

Each binary problem minimises

    P(w) = lam/2 * |w|^2 + 1/n * sum_i max(0, 1 - y_i <w, x_i>)

over the bias-augmented inputs ``x_i = [features_i, 1]`` (the bias is regularised).
Dual variables use the scaling ``w = sum_i beta_i y_i x_i`` with ``beta_i`` boxed
in ``[0, 1/(lam*n)]``; the dual objective is ``lam * sum(beta) - lam/2 * |w|^2``.
A coordinate step maximises the dual exactly in ``beta_i``, so the dual never
decreases. Training stops once ``P - D <= gap_tol`` or after ``max_epochs``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagic, DimensionMismatch, IoError, NonPositiveLambda, SingleClass


@dataclass(frozen=True)
class LinearSvmModel:
    classes: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    lam: float
    training_meta: dict = field(default_factory=dict, compare=False)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class BinaryResult:
    w: np.ndarray  # bias-augmented, last entry is the bias
    beta: np.ndarray
    epochs: int
    gap: float
    primal: float
    dual: float
    dual_history: list = field(default_factory=list)


def _objectives(lam, n, beta, margins, w_sq):
    primal = lam / 2 * w_sq + np.maximum(0.0, 1.0 - margins).sum() / n
    dual = lam * beta.sum() - lam / 2 * w_sq
    return primal, dual


def _sdca_gram(gram, y, lam, max_epochs, gap_tol, rng) -> BinaryResult:
    """SDCA tracking ``v = gram @ (beta * y)`` instead of ``w``: O(n) per step."""
    n = len(y)
    upper = 1.0 / (lam * n)
    beta = np.zeros(n)
    v = np.zeros(n)
    diag = np.diag(gram).copy()
    yl = y.tolist()
    history = []
    epochs = 0
    gap = primal = dual = np.inf
    for epochs in range(1, max_epochs + 1):
        for i in rng.permutation(n).tolist():
            if diag[i] <= 0:
                continue
            yi = yl[i]
            b_old = beta[i]
            b_new = min(max(b_old + (1.0 - yi * v[i]) / diag[i], 0.0), upper)
            if b_new != b_old:
                beta[i] = b_new
                v += ((b_new - b_old) * yi) * gram[i]
        by = beta * y
        primal, dual = _objectives(lam, n, beta, y * v, float(by @ v))
        gap = primal - dual
        history.append(dual)
        if gap <= gap_tol:
            break
    return BinaryResult(None, beta, epochs, gap, primal, dual, history)


def _sdca_primal(x, y, lam, max_epochs, gap_tol, rng) -> BinaryResult:
    """SDCA keeping ``w`` explicitly: O(d) per step, used when n > d."""
    n, d = x.shape
    upper = 1.0 / (lam * n)
    beta = np.zeros(n)
    w = np.zeros(d)
    sq = np.einsum("ij,ij->i", x, x)
    yl = y.tolist()
    history = []
    epochs = 0
    gap = primal = dual = np.inf
    for epochs in range(1, max_epochs + 1):
        for i in rng.permutation(n).tolist():
            if sq[i] <= 0:
                continue
            yi = yl[i]
            xi = x[i]
            b_old = beta[i]
            b_new = min(max(b_old + (1.0 - yi * float(xi @ w)) / sq[i], 0.0), upper)
            if b_new != b_old:
                beta[i] = b_new
                w += ((b_new - b_old) * yi) * xi
        primal, dual = _objectives(lam, n, beta, y * (x @ w), float(w @ w))
        gap = primal - dual
        history.append(dual)
        if gap <= gap_tol:
            break
    return BinaryResult(w, beta, epochs, gap, primal, dual, history)


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((len(x), 1))])


def train_binary_sdca(
    features,
    signs,
    lam: float,
    max_epochs: int = 200,
    gap_tol: float = 1e-3,
    seed: int = 0,
    method: str = "auto",
) -> BinaryResult:
    """Binary hinge-loss SVM on labels in {-1, +1}; ``result.w`` includes the bias last."""
    if not lam > 0:
        raise NonPositiveLambda(f"lambda must be positive, got {lam}")
    xa = _augment(np.asarray(features, dtype=np.float64))
    y = np.asarray(signs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    if method == "auto":
        method = "gram" if len(xa) <= xa.shape[1] else "primal"
    if method == "primal":
        return _sdca_primal(xa, y, lam, max_epochs, gap_tol, rng)
    res = _sdca_gram(xa @ xa.T, y, lam, max_epochs, gap_tol, rng)
    res.w = xa.T @ (res.beta * y)
    return res


def train_sdca(
    features,
    labels,
    lam: float | None = None,
    max_epochs: int = 200,
    gap_tol: float = 1e-3,
    seed: int = 0,
    method: str = "auto",
) -> LinearSvmModel:
    """One-vs-rest SDCA over the distinct labels (ascending). ``lam`` defaults to ``1/n``."""
    if isinstance(features, np.ndarray):
        x = np.asarray(features, dtype=np.float64)
    else:
        rows = [np.asarray(f, dtype=np.float64) for f in features]
        if len({r.shape for r in rows}) > 1:
            raise DimensionMismatch("feature vectors differ in length")
        x = np.stack(rows)
    if x.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D feature matrix, got shape {x.shape}")
    labels = np.asarray(labels)
    if len(labels) != len(x):
        raise DimensionMismatch(f"{len(x)} feature vectors but {len(labels)} labels")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise SingleClass(f"need at least two classes, got {classes.tolist()}")
    n = len(x)
    if lam is None:
        lam = 1.0 / n
    if not lam > 0:
        raise NonPositiveLambda(f"lambda must be positive, got {lam}")

    xa = _augment(x)
    if method == "auto":
        method = "gram" if n <= xa.shape[1] else "primal"
    gram = xa @ xa.T if method == "gram" else None
    rows = []
    meta = {"epochs": [], "duality_gap": [], "primal": [], "dual_history": [], "method": method}
    for c_idx, c in enumerate(classes):
        y = np.where(labels == c, 1.0, -1.0)
        rng = np.random.default_rng([seed, c_idx])
        if gram is not None:
            res = _sdca_gram(gram, y, lam, max_epochs, gap_tol, rng)
            res.w = xa.T @ (res.beta * y)
        else:
            res = _sdca_primal(xa, y, lam, max_epochs, gap_tol, rng)
        rows.append(res.w)
        meta["epochs"].append(res.epochs)
        meta["duality_gap"].append(float(res.gap))
        meta["primal"].append(float(res.primal))
        meta["dual_history"].append(res.dual_history)
    wa = np.vstack(rows)
    return LinearSvmModel(classes, wa[:, :-1].copy(), wa[:, -1].copy(), float(lam), meta)


def decision_scores(model: LinearSvmModel, x) -> np.ndarray:
    """``W @ x + bias``; ``x`` may be one vector or a stack of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise DimensionMismatch(f"input dim {x.shape[-1]} != model dim {model.dim}")
    return x @ model.weights.T + model.bias


def predict(model: LinearSvmModel, x):
    """Class id with the largest score; ties go to the lowest class id."""
    scores = decision_scores(model, x)
    return model.classes[np.argmax(scores, axis=-1)]


_SVM_MAGIC = b"SVM1"


def save_svm(model: LinearSvmModel, path: str | os.PathLike) -> None:
    """Write the SVM1 layout, followed by a trailer of int64 class ids."""
    with open(path, "wb") as fh:
        fh.write(_SVM_MAGIC)
        fh.write(struct.pack("<IId", model.num_classes, model.dim, model.lam))
        fh.write(np.ascontiguousarray(model.weights, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.bias, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.classes, dtype="<i8").tobytes())


def load_svm(path: str | os.PathLike) -> LinearSvmModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != _SVM_MAGIC:
        raise BadMagic(f"{path}: expected SVM1 header")
    c, d, lam = struct.unpack_from("<IId", raw, 4)
    off = 20
    body = 8 * (c * d + c)
    if len(raw) not in (off + body, off + body + 8 * c):
        raise IoError(f"{path}: unexpected size {len(raw)}")
    weights = np.frombuffer(raw, dtype="<f8", count=c * d, offset=off).reshape(c, d).astype(np.float64)
    bias = np.frombuffer(raw, dtype="<f8", count=c, offset=off + 8 * c * d).astype(np.float64)
    if len(raw) == off + body + 8 * c:
        classes = np.frombuffer(raw, dtype="<i8", count=c, offset=off + body).astype(np.int64)
    else:
        classes = np.arange(c)
    return LinearSvmModel(classes, weights, bias, lam, {})
