"""Repeated stratified random-subsampling evaluation and its report files.

For every training fraction and fold a fresh stratified split is drawn; the GMM
(unless shared), the Fisher encodings' vocabulary and the SVM see training
images only. Fold seeds come from ``SeedSequence([seed, fraction_index, fold])``
so folds are independent, reproducible and order-free.
"""

from __future__ import annotations

import csv
import math
import os
import time
import xml.sax.saxutils as xml_escape
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import dsift, encode, svm
from .dataset import Manifest, labels_for, split_ids, stratified_split
from .embed import FUSION_NORMALIZATION, EmbeddingTable, FeatureSet, feature_vector, standin_table
from .errors import EmptyTestSet, IoError, MissingFeatures, TooFewPoints

DEFAULT_FRACTIONS = tuple(round(0.20 + 0.05 * i, 2) for i in range(13))
ALL_FEATURE_SETS = (FeatureSet.EMBEDDING_ONLY, FeatureSet.IFV_ONLY, FeatureSet.FUSED)
TUKEY_K = 1.5


@dataclass(frozen=True)
class EvalConfig:
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    folds: int = 40
    feature_sets: tuple[FeatureSet, ...] = ALL_FEATURE_SETS
    seed: int = 0
    K: int = 160
    gmm_pool: int = 200000
    gmm_max_iter: int = 100
    gmm_tol: float = 1e-4
    lam: float | None = None
    gap_tol: float = 1e-3
    max_epochs: int = 200
    shared_gmm: bool = False
    workers: int = 1

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if any(not 0 < f < 1 for f in fr):
            raise ValueError("fractions must lie in (0, 1)")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("fractions must be strictly increasing")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        object.__setattr__(self, "fractions", fr)
        object.__setattr__(self, "feature_sets", tuple(FeatureSet.parse(f) if isinstance(f, str) else f
                                                       for f in self.feature_sets))


def fold_seed(seed: int, fraction_index: int, fold: int) -> int:
    """Independent 63-bit seed for one (fraction, fold) cell."""
    state = np.random.SeedSequence([seed & (2**64 - 1), fraction_index, fold]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# --- timing ----------------------------------------------------------------------


@dataclass(frozen=True)
class StageTiming:
    stage: str
    ms_per_image: float
    images: int
    workers: int


@dataclass
class StageTimer:
    """Accumulates wall-clock time per pipeline stage."""

    workers: int = 1
    _total_ms: dict = field(default_factory=dict)
    _images: dict = field(default_factory=dict)

    def add(self, stage: str, ms: float, images: int) -> None:
        self._total_ms[stage] = self._total_ms.get(stage, 0.0) + ms
        self._images[stage] = self._images.get(stage, 0) + images

    def time(self, stage: str, images: int):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.add(stage, (time.perf_counter() - self.t0) * 1e3, images)

        return _Ctx()

    def merge(self, other: "StageTimer") -> None:
        for stage, ms in other._total_ms.items():
            self.add(stage, ms, other._images[stage])

    def table(self) -> tuple[StageTiming, ...]:
        return tuple(
            StageTiming(s, self._total_ms[s] / max(self._images[s], 1), self._images[s], self.workers)
            for s in self._total_ms
        )


@dataclass(frozen=True)
class SpeedupReport:
    images: int
    workers: int
    serial_ms: float
    parallel_ms: float
    identical: bool

    @property
    def speedup(self) -> float:
        return self.serial_ms / self.parallel_ms if self.parallel_ms > 0 else math.inf


def _same_results(a: Sequence[dsift.ExtractResult], b: Sequence[dsift.ExtractResult]) -> bool:
    return all(
        x.image_id == y.image_id
        and x.descriptors.descriptors.tobytes() == y.descriptors.descriptors.tobytes()
        and x.mean_descriptor.tobytes() == y.mean_descriptor.tobytes()
        for x, y in zip(a, b)
    ) and len(a) == len(b)


def measure_extraction_speedup(
    items, params: dsift.DsiftParams = dsift.DsiftParams(), workers: int = 4, max_descriptors=None, seed: int = 0
) -> SpeedupReport:
    """Wall time of one batch extraction with 1 worker versus ``workers``, plus an output comparison."""
    t0 = time.perf_counter()
    serial = dsift.extract_batch(items, params, 1, max_descriptors, seed)
    t1 = time.perf_counter()
    parallel = dsift.extract_batch(items, params, workers, max_descriptors, seed)
    t2 = time.perf_counter()
    return SpeedupReport(len(items), workers, (t1 - t0) * 1e3, (t2 - t1) * 1e3, _same_results(serial, parallel))


# --- features --------------------------------------------------------------------


@dataclass
class FeatureStore:
    """Per-image inputs: DSIFT descriptor rows and/or embeddings, keyed by image id."""

    descriptors: Mapping[int, np.ndarray] | None = None
    embeddings: Mapping[int, np.ndarray] | EmbeddingTable | None = None
    timer: StageTimer = field(default_factory=StageTimer)

    def has(self, feature_set: FeatureSet, image_id: int) -> bool:
        need_desc = feature_set in (FeatureSet.IFV_ONLY, FeatureSet.FUSED)
        need_emb = feature_set in (FeatureSet.EMBEDDING_ONLY, FeatureSet.FUSED)
        if need_desc and (self.descriptors is None or image_id not in self.descriptors):
            return False
        if need_emb and (self.embeddings is None or image_id not in self.embeddings):
            return False
        return True


def build_features(
    manifest: Manifest,
    feature_sets: Sequence[FeatureSet],
    params: dsift.DsiftParams = dsift.DsiftParams(),
    workers: int = 1,
    max_descriptors: int | None = 2000,
    seed: int = 0,
    embeddings: EmbeddingTable | None = None,
) -> FeatureStore:
    """Extract whatever the feature sets need. Without an embedding table, stand-in embeddings are used."""
    timer = StageTimer(workers)
    recs = manifest.usable
    need_emb = any(f in (FeatureSet.EMBEDDING_ONLY, FeatureSet.FUSED) for f in feature_sets)
    need_desc = any(f in (FeatureSet.IFV_ONLY, FeatureSet.FUSED) for f in feature_sets)
    descriptors = means = None
    if need_desc or (need_emb and embeddings is None):
        with timer.time("dsift_extract", len(recs)):
            res = dsift.extract_batch([(r.image_id, r.image_path) for r in recs], params, workers, max_descriptors, seed)
        descriptors = {r.image_id: r.descriptors.descriptors for r in res}
        means = {r.image_id: r.mean_descriptor for r in res}
    if need_emb:
        if embeddings is None:
            with timer.time("embedding_load", len(recs)):
                # float32, as the EMB1 files written by extraction store them
                table = standin_table(means, seed=seed)
                embeddings = EmbeddingTable(table.dim, {i: v.astype(np.float32) for i, v in table.entries.items()})
        else:
            timer.add("embedding_load", 0.0, len(recs))
    return FeatureStore(descriptors if need_desc else None, embeddings, timer)


# --- protocol --------------------------------------------------------------------

# trainer(x_train, y_train, seed) -> predict(x) -> labels
Trainer = Callable[[np.ndarray, np.ndarray, int], Callable[[np.ndarray], np.ndarray]]
Audit = Callable[[str, tuple, frozenset], None]


def sdca_trainer(lam=None, gap_tol=1e-3, max_epochs=200) -> Trainer:
    def train(x, y, seed):
        model = svm.train_sdca(x, y, lam=lam, gap_tol=gap_tol, max_epochs=max_epochs, seed=seed)
        return lambda q: svm.predict(model, q)

    return train


@dataclass(frozen=True)
class FoldResult:
    feature_set: FeatureSet
    fraction_index: int
    fraction: float
    fold: int
    seed: int
    n_test: int
    n_correct: int
    classes: tuple[int, ...]
    confusion: tuple[tuple[int, ...], ...]  # [true][predicted], over ``classes``

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_test


@dataclass(frozen=True)
class SummaryRow:
    feature_set: FeatureSet
    fraction: float
    mean_accuracy: float
    stddev: float
    outlier: bool = False


@dataclass(frozen=True)
class EvalReport:
    config: EvalConfig
    folds: tuple[FoldResult, ...]
    summary: tuple[SummaryRow, ...]
    timings: tuple[StageTiming, ...] = field(default=(), compare=False)
    skipped: int = 0
    config_echo: Mapping = field(default_factory=dict)

    def fold_accuracies(self, feature_set: FeatureSet, fraction: float) -> list[float]:
        return [f.accuracy for f in self.folds if f.feature_set is feature_set and f.fraction == fraction]

    def row(self, feature_set: FeatureSet, fraction: float) -> SummaryRow:
        for r in self.summary:
            if r.feature_set is feature_set and r.fraction == fraction:
                return r
        raise KeyError((feature_set, fraction))


def _confusion(classes, y_true, y_pred):
    index = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes) + 1), dtype=np.int64)  # last column: unknown prediction
    for t, p in zip(y_true.tolist(), y_pred.tolist()):
        m[index[t], index.get(p, len(classes))] += 1
    return tuple(tuple(int(v) for v in row[: len(classes)]) for row in m)


def _encode_all(gmm, ids, store: FeatureStore):
    return {i: encode.encode_ifv(gmm, store.descriptors[i]) for i in ids}


def _run_cell(manifest, store, config, trainer, audit, shared, fi, fold):
    fraction = config.fractions[fi]
    seed = fold_seed(config.seed, fi, fold)
    timer = StageTimer(config.workers)
    split = stratified_split(manifest, fraction, seed)
    tr, te = split_ids(split, manifest)
    if not te:
        raise EmptyTestSet(f"fraction {fraction} leaves no test images")
    key = (fi, fold)
    y_tr, y_te = labels_for(manifest, tr), labels_for(manifest, te)
    classes = tuple(int(c) for c in np.unique(np.concatenate([y_tr, y_te])))

    ifvs = None
    if any(f in (FeatureSet.IFV_ONLY, FeatureSet.FUSED) for f in config.feature_sets):
        if shared is not None:
            gmm = shared
        else:
            if audit:
                audit("gmm_pool", key, frozenset(tr))
            with timer.time("gmm_fit", len(tr)):
                pool = encode.sample_pool([store.descriptors[i] for i in tr], config.gmm_pool, seed)
                gmm = encode.fit_gmm(pool, K=config.K, seed=seed, max_iter=config.gmm_max_iter, tol=config.gmm_tol)
        with timer.time("ifv_encode", len(tr) + len(te)):
            ifvs = _encode_all(gmm, tr + te, store)

    out = []
    for fs in config.feature_sets:
        def vec(i):
            emb = store.embeddings[i] if fs is not FeatureSet.IFV_ONLY else None
            return feature_vector(fs, ifvs[i] if ifvs is not None else None, emb)

        x_tr = np.stack([vec(i) for i in tr])
        x_te = np.stack([vec(i) for i in te])
        if audit:
            audit("svm_train", key, frozenset(tr))
        with timer.time("svm_train", len(tr)):
            predict = trainer(x_tr, y_tr, seed)
        y_hat = np.asarray(predict(x_te))
        out.append(
            FoldResult(fs, fi, fraction, fold, seed, len(te), int((y_hat == y_te).sum()), classes,
                       _confusion(classes, y_te, y_hat))
        )
    return out, timer


def _aggregate(config: EvalConfig, folds: Sequence[FoldResult]) -> tuple[SummaryRow, ...]:
    rows = []
    for fs in config.feature_sets:
        for fi, fraction in enumerate(config.fractions):
            acc = [f.accuracy for f in folds if f.feature_set is fs and f.fraction_index == fi]
            mean = math.fsum(acc) / len(acc)
            sd = math.sqrt(math.fsum((a - mean) ** 2 for a in acc) / (len(acc) - 1)) if len(acc) > 1 else 0.0
            rows.append(SummaryRow(fs, fraction, mean, sd))
    return tuple(rows)


def run_protocol(
    manifest: Manifest,
    features: FeatureStore,
    config: EvalConfig = EvalConfig(),
    trainer: Trainer | None = None,
    audit: Audit | None = None,
    cell_order: Sequence[tuple[int, int]] | None = None,
    config_echo: Mapping | None = None,
) -> EvalReport:
    """Run every (feature set, fraction, fold) cell and aggregate.

    ``cell_order`` only changes execution order; the report is the same for any
    permutation. Records whose image file is missing are skipped and counted.
    """
    usable = manifest.usable
    for fs in config.feature_sets:
        lacking = [r.image_id for r in usable if not features.has(fs, r.image_id)]
        if lacking:
            raise MissingFeatures(f"{fs.value}: no features for image_id(s) {lacking[:5]}")
    skipped = manifest.num_missing
    if skipped:
        manifest = Manifest.from_records(usable)
    trainer = trainer or sdca_trainer(config.lam, config.gap_tol, config.max_epochs)
    timer = StageTimer(config.workers)
    timer.merge(features.timer)

    shared = None
    if config.shared_gmm and any(f in (FeatureSet.IFV_ONLY, FeatureSet.FUSED) for f in config.feature_sets):
        ids = [r.image_id for r in usable]
        with timer.time("gmm_fit", len(ids)):
            pool = encode.sample_pool([features.descriptors[i] for i in ids], config.gmm_pool, config.seed)
            shared = encode.fit_gmm(pool, K=config.K, seed=config.seed, max_iter=config.gmm_max_iter,
                                    tol=config.gmm_tol)

    cells = list(cell_order) if cell_order is not None else [
        (fi, f) for fi in range(len(config.fractions)) for f in range(config.folds)
    ]

    def job(cell):
        return _run_cell(manifest, features, config, trainer, audit, shared, *cell)

    if config.workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            outputs = list(pool.map(job, cells))
    else:
        outputs = [job(c) for c in cells]

    folds = []
    for res, t in outputs:
        folds.extend(res)
        timer.merge(t)
    order = {fs: i for i, fs in enumerate(config.feature_sets)}
    folds.sort(key=lambda f: (order[f.feature_set], f.fraction_index, f.fold))
    echo = dict(config_echo) if config_echo is not None else _config_dict(config)
    return EvalReport(config, tuple(folds), _aggregate(config, folds), timer.table(), skipped, echo)


def _config_dict(config: EvalConfig) -> dict:
    d = asdict(config)
    d["feature_sets"] = [f.value for f in config.feature_sets]
    d["fractions"] = list(config.fractions)
    return d


# --- outliers ----------------------------------------------------------------------


def tukey_flags(values: Sequence[float], k: float = TUKEY_K) -> list[bool]:
    """Flags values outside ``[Q1 - k*IQR, Q3 + k*IQR]`` (linear-interpolated quartiles)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 4:
        raise TooFewPoints(f"Tukey fences need at least 4 points, got {len(v)}")
    q1, q3 = np.percentile(v, [25, 75])
    iqr = q3 - q1
    return [bool(x < q1 - k * iqr or x > q3 + k * iqr) for x in v]


def flag_outliers(report: EvalReport) -> EvalReport:
    """Set the outlier flag of each feature set's per-fraction means by Tukey fences."""
    rows = list(report.summary)
    for fs in report.config.feature_sets:
        idx = [i for i, r in enumerate(rows) if r.feature_set is fs]
        flags = tukey_flags([rows[i].mean_accuracy for i in idx])
        for i, flag in zip(idx, flags):
            rows[i] = replace(rows[i], outlier=flag)
    return replace(report, summary=tuple(rows))


# --- report files ----------------------------------------------------------------------


def _g(x: float) -> str:
    return f"{x:.6g}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def render_svg(report: EvalReport, timestamp: str | None = None) -> str:
    """Grouped bar chart: x = training fraction, one bar per feature set, whiskers at +/-1 sd."""
    W, H = 900, 420
    left, right, top, bottom = 60, 160, 30, 50
    pw, ph = W - left - right, H - top - bottom
    fractions = report.config.fractions if report.config.feature_sets else ()
    sets = report.config.feature_sets
    colours = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee")

    def ypx(acc):
        return top + ph * (1 - acc)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
    ]
    if timestamp:
        stamp = xml_escape.escape(timestamp).replace("--", "- -").rstrip("-")
        out.append(f"<!-- generated {stamp} -->")
    echo = "; ".join(f"{k}={_echo_value(v)}" for k, v in sorted(_header(report).items()))
    out.append(f"<desc>{xml_escape.escape(echo)}</desc>")
    out.append('<rect x="0" y="0" width="100%" height="100%" fill="white"/>')
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>')
    for t in range(0, 11, 2):
        y = ypx(t / 10)
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" font-size="11" text-anchor="end">{t / 10:.1f}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{H - 10}" font-size="13" text-anchor="middle">training fraction</text>')
    out.append(f'<text x="15" y="{top + ph / 2}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2})">mean accuracy</text>')
    if fractions and sets:
        group = pw / len(fractions)
        bar = group * 0.8 / len(sets)
        for fi, fraction in enumerate(fractions):
            x0 = left + fi * group + group * 0.1
            out.append(f'<text x="{left + (fi + 0.5) * group:.2f}" y="{top + ph + 16}" font-size="11" '
                       f'text-anchor="middle">{fraction:.2f}</text>')
            for si, fs in enumerate(sets):
                r = report.row(fs, fraction)
                x = x0 + si * bar
                y = ypx(r.mean_accuracy)
                colour = colours[si % len(colours)]
                out.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar:.2f}" height="{top + ph - y:.2f}" '
                           f'fill="{colour}"><title>{fs.value} {fraction:.2f}: {_g(r.mean_accuracy)}</title></rect>')
                cx = x + bar / 2
                lo, hi = ypx(max(r.mean_accuracy - r.stddev, 0)), ypx(min(r.mean_accuracy + r.stddev, 1))
                out.append(f'<line x1="{cx:.2f}" y1="{lo:.2f}" x2="{cx:.2f}" y2="{hi:.2f}" stroke="black"/>')
                if r.outlier:
                    out.append(f'<text x="{cx:.2f}" y="{hi - 4:.2f}" font-size="12" text-anchor="middle">*</text>')
    for si, fs in enumerate(sets):
        y = top + 10 + 18 * si
        out.append(f'<rect x="{left + pw + 15}" y="{y}" width="12" height="12" fill="{colours[si % len(colours)]}"/>')
        out.append(f'<text x="{left + pw + 32}" y="{y + 10}" font-size="12">{fs.value}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _header(report: EvalReport) -> dict:
    """Config echo plus the run facts every report carries."""
    header = dict(report.config_echo)
    header["fusion_normalization"] = FUSION_NORMALIZATION
    header["skipped_missing_images"] = report.skipped
    return header


def emit_report(report: EvalReport, out_dir: str | os.PathLike, timestamp: str | None = None) -> dict[str, Path]:
    """Write results.csv, folds.csv, figure14.svg, config.txt and timings.txt into ``out_dir``.

    Everything except timings.txt is a pure function of the report's numbers and config.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / name for name in ("results.csv", "folds.csv", "timings.txt", "figure14.svg", "config.txt")}
        _write_csv(
            paths["results.csv"],
            ["feature_set", "fraction", "mean_accuracy", "stddev", "outlier"],
            [[r.feature_set.value, _g(r.fraction), _g(r.mean_accuracy), _g(r.stddev), str(r.outlier).lower()]
             for r in report.summary],
        )
        _write_csv(
            paths["folds.csv"],
            ["feature_set", "fraction", "fold", "seed", "n_test", "n_correct", "accuracy", "confusion"],
            [[f.feature_set.value, _g(f.fraction), f.fold, f.seed, f.n_test, f.n_correct, _g(f.accuracy),
              "|".join(" ".join(str(v) for v in row) for row in f.confusion)]
             for f in report.folds],
        )
        paths["timings.txt"].write_text(format_timings(report.timings))
        paths["figure14.svg"].write_text(render_svg(report, timestamp))
        header = _header(report)
        paths["config.txt"].write_text("".join(f"{k} = {_echo_value(v)}\n" for k, v in sorted(header.items())))
    except OSError as exc:
        raise IoError(f"cannot write report to {out}: {exc}") from exc
    return paths


def format_timings(timings: Sequence[StageTiming]) -> str:
    lines = [f"{'stage':<16}{'ms/image':>12}{'images':>9}{'workers':>9}"]
    lines += [f"{t.stage:<16}{t.ms_per_image:>12.1f}{t.images:>9}{t.workers:>9}" for t in timings]
    return "\n".join(lines) + "\n"


def _echo_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_echo_value(x) for x in v)
    if isinstance(v, bool):
        return str(v).lower()
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
