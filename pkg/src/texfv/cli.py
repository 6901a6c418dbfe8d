"""``texfv`` command line: synth, extract, train, eval, classify, colors.

Every subcommand accepts ``--config FILE`` plus one flag per config key. Module
errors end the process with a single ``error: <Code>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
import textwrap
from pathlib import Path

import numpy as np

from . import dsift, encode, evaluation, svm
from .color import dominant_colors
from .config import RunConfig, config_keys, format_value, load_config
from .dataset import label_name, labels_for, load_image, parse_manifest, split_ids, stratified_split
from .embed import EmbeddingTable, FeatureSet, feature_vector, load_embeddings, save_embeddings, standin_embedding
from .errors import IoError, TexfvError
from .synth import SynthSpec, generate

GMM_FILE = "model.gmm"
SVM_FILE = "model.svm"
CONFIG_FILE = "config.txt"
EMB_FILE = "standin_embeddings.emb"
DSF_DIR = "dsift"


def _echo(cfg: RunConfig) -> dict:
    return {k: format_value(v) for k, v in cfg.as_dict().items()}


def _write_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(cfg.to_text())


def _needs(fs_list):
    fs_list = [FeatureSet.parse(f) if isinstance(f, str) else f for f in fs_list]
    desc = any(f in (FeatureSet.IFV_ONLY, FeatureSet.FUSED) for f in fs_list)
    emb = any(f in (FeatureSet.EMBEDDING_ONLY, FeatureSet.FUSED) for f in fs_list)
    return desc, emb


def _explicit_embeddings(cfg: RunConfig) -> EmbeddingTable | None:
    return load_embeddings(cfg.embeddings) if cfg.embeddings else None


def _feature_store(manifest, cfg: RunConfig, feature_sets, features_dir: str | None) -> evaluation.FeatureStore:
    """Features from an ``extract`` output directory, or extracted now."""
    if features_dir is None:
        return evaluation.build_features(manifest, feature_sets, cfg.dsift_params(), cfg.workers,
                                         cfg.descriptor_cap(), cfg.seed, _explicit_embeddings(cfg))
    root = Path(features_dir)
    need_desc, need_emb = _needs(feature_sets)
    timer = evaluation.StageTimer(cfg.workers)
    descriptors = None
    if need_desc:
        descriptors = {}
        with timer.time("dsift_load", len(manifest.usable)):
            for r in manifest.usable:
                p = root / DSF_DIR / f"{r.image_id}.dsf"
                if p.exists():
                    descriptors[r.image_id] = dsift.load_descriptors(p).descriptors
    embeddings = None
    if need_emb:
        with timer.time("embedding_load", len(manifest.usable)):
            embeddings = _explicit_embeddings(cfg) or load_embeddings(root / EMB_FILE)
    return evaluation.FeatureStore(descriptors, embeddings, timer)


# --- subcommands ---------------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args) -> dict:
    spec = SynthSpec.from_json(args.spec) if args.spec else cfg.synth_spec()
    out = Path(args.out)
    manifest = generate(spec, out)
    _write_config(cfg, out)
    return {"manifest": str(out / "manifest.csv"), "images": len(manifest),
            "per_class": {label_name(k): v for k, v in manifest.class_counts.items() if v}}


def cmd_extract(cfg: RunConfig, args) -> dict:
    manifest = parse_manifest(args.manifest)
    out = Path(args.out)
    (out / DSF_DIR).mkdir(parents=True, exist_ok=True)
    timer = evaluation.StageTimer(cfg.workers)
    recs = manifest.usable
    with timer.time("dsift_extract", len(recs)):
        results = dsift.extract_batch([(r.image_id, r.image_path) for r in recs], cfg.dsift_params(), cfg.workers,
                                      cfg.descriptor_cap(), cfg.seed)
    for res in results:
        dsift.save_descriptors(res.descriptors, out / DSF_DIR / f"{res.image_id}.dsf")
    with timer.time("embedding_load", len(recs)):
        table = EmbeddingTable(cfg.embedding_dim, {
            res.image_id: standin_embedding(res.mean_descriptor, cfg.embedding_dim, cfg.seed) for res in results
        })
        save_embeddings(table, out / EMB_FILE)
    (out / "timings.txt").write_text(evaluation.format_timings(timer.table()))
    _write_config(cfg, out)
    return {"images": len(results), "skipped_missing": manifest.num_missing,
            "descriptors_total": int(sum(r.total_count for r in results)), "out": str(out)}


def cmd_train(cfg: RunConfig, args) -> dict:
    manifest = parse_manifest(args.manifest)
    fs = FeatureSet.parse(cfg.feature_set)
    store = _feature_store(manifest, cfg, [fs], args.features)
    split = stratified_split(manifest, cfg.train_fraction, cfg.seed)
    tr, te = split_ids(split, manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    gmm = None
    if fs is not FeatureSet.EMBEDDING_ONLY:
        pool = encode.sample_pool([store.descriptors[i] for i in tr], cfg.gmm_pool, cfg.seed)
        gmm = encode.fit_gmm(pool, K=cfg.K, seed=cfg.seed, max_iter=cfg.gmm_max_iter, tol=cfg.gmm_tol,
                             workers=cfg.workers)
        encode.save_gmm(gmm, out / GMM_FILE)

    def vectors(ids):
        return np.stack([
            feature_vector(fs, encode.encode_ifv(gmm, store.descriptors[i]) if gmm else None,
                           store.embeddings[i] if fs is not FeatureSet.IFV_ONLY else None)
            for i in ids
        ])

    model = svm.train_sdca(vectors(tr), labels_for(manifest, tr), lam=cfg.lam, gap_tol=cfg.gap_tol,
                           max_epochs=cfg.max_epochs, seed=cfg.seed)
    svm.save_svm(model, out / SVM_FILE)
    _write_config(cfg, out)
    (out / "train_ids.txt").write_text("".join(f"{i}\n" for i in tr))
    summary = {"feature_set": fs.value, "train_images": len(tr), "test_images": len(te),
               "classes": [label_name(int(c)) for c in model.classes],
               "max_duality_gap": max(model.training_meta["duality_gap"])}
    if te:
        pred = svm.predict(model, vectors(te))
        summary["test_accuracy"] = float(np.mean(pred == labels_for(manifest, te)))
    (out / "train_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_eval(cfg: RunConfig, args) -> dict:
    manifest = parse_manifest(args.manifest)
    ec = cfg.eval_config()
    store = _feature_store(manifest, cfg, ec.feature_sets, args.features)
    report = evaluation.run_protocol(manifest, store, ec, config_echo=_echo(cfg))
    if len(ec.fractions) >= 4 and ec.feature_sets:
        report = evaluation.flag_outliers(report)
    stamp = None
    if args.svg_timestamp:
        stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    paths = evaluation.emit_report(report, args.out, timestamp=stamp)
    return {
        "results": str(paths["results.csv"]),
        "skipped_missing": report.skipped,
        "summary": [{"feature_set": r.feature_set.value, "fraction": r.fraction, "mean_accuracy": r.mean_accuracy,
                     "stddev": r.stddev, "outlier": r.outlier} for r in report.summary],
    }


def _colors(cfg: RunConfig, rgb, image_id):
    return dominant_colors(rgb, k=cfg.color_k, seed=cfg.seed, min_proportion=cfg.min_proportion, image_id=image_id)


def cmd_classify(cfg: RunConfig, args) -> dict:
    model_dir = Path(args.model)
    fs = FeatureSet.parse(cfg.feature_set)
    model = svm.load_svm(model_dir / SVM_FILE)
    gray, rgb = load_image(args.image)
    image_id = args.image_id if args.image_id is not None else 0
    ifv = emb = None
    if fs is not FeatureSet.EMBEDDING_ONLY or not cfg.embeddings:
        dm = dsift.extract_dsift_multiscale(gray, cfg.dsift_params())
        idx = dsift.subsample_indices(dm.count, cfg.descriptor_cap(), cfg.seed, image_id)
        kept = (dm if idx is None else dm.subset(idx)).descriptors.astype(np.float32)
    if fs is not FeatureSet.EMBEDDING_ONLY:
        ifv = encode.encode_ifv(encode.load_gmm(model_dir / GMM_FILE), kept)
    if fs is not FeatureSet.IFV_ONLY:
        if cfg.embeddings:
            emb = load_embeddings(cfg.embeddings)[image_id]
        else:
            emb = standin_embedding(dm.descriptors.mean(axis=0), cfg.embedding_dim, cfg.seed).astype(np.float32)
    label = int(svm.predict(model, feature_vector(fs, ifv, emb)))
    report = _colors(cfg, rgb, args.image_id).to_dict()
    return {"image": str(args.image), "texture": label_name(label), "label_id": label, "feature_set": fs.value,
            "colors": report["colors"], "palette": report["palette"], "config": _echo(cfg)}


def cmd_colors(cfg: RunConfig, args) -> dict:
    _, rgb = load_image(args.image)
    out = _colors(cfg, rgb, args.image_id).to_dict()
    out["config"] = _echo(cfg)
    return out


COMMANDS = {
    "synth": (cmd_synth, "render a synthetic labelled texture set"),
    "extract": (cmd_extract, "multi-scale dense SIFT for every image in a manifest"),
    "train": (cmd_train, "fit GMM and SVM on a stratified training split"),
    "eval": (cmd_eval, "repeated random-subsampling evaluation with report files"),
    "classify": (cmd_classify, "predict texture and dominant colours of one image"),
    "colors": (cmd_colors, "dominant colours of one image"),
}


class _HelpFormatter(argparse.HelpFormatter):
    # keep long defaults (comma-separated lists) on one token
    def _split_lines(self, text, width):
        return textwrap.wrap(" ".join(text.split()), width, break_long_words=False, break_on_hyphens=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texfv", description="Clothing texture and colour classification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=_HelpFormatter)
        own = p.add_argument_group("command arguments")
        if name == "synth":
            own.add_argument("--out", required=True, help="output directory")
            own.add_argument("--spec", help="synth spec JSON file (overrides the synthesis keys)")
        if name in ("extract", "train", "eval"):
            own.add_argument("--manifest", required=True, help="manifest CSV")
        if name == "extract":
            own.add_argument("--out", required=True, help="output directory for .dsf files and embeddings")
        if name in ("train", "eval"):
            own.add_argument("--out", required=True, help="output directory")
            own.add_argument("--features", help="directory written by 'extract' (default: extract now)")
        if name == "eval":
            own.add_argument("--svg-timestamp", action="store_true", help="add a generation-time comment to the SVG")
        if name == "classify":
            own.add_argument("--model", required=True, help="directory written by 'train'")
        if name in ("classify", "colors"):
            own.add_argument("--image", required=True, help="PNG or JPEG image")
            own.add_argument("--image-id", type=int, help="id echoed in the output and used for lookups")
        own.add_argument("--config", help="flat 'key = value' config file")
        keys = p.add_argument_group("config keys (flags override the config file)")
        for key, default, text in config_keys():
            flag = "--" + key.replace("_", "-")
            kw = dict(dest=f"cfg_{key}", metavar="VALUE", help=f"{text} (default: {format_value(default)})")
            if isinstance(default, bool):
                kw.update(nargs="?", const="true")
            keys.add_argument(flag, **kw)
    return parser


def resolve_config(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    base = None
    if args.command == "classify":
        model_cfg = Path(args.model) / CONFIG_FILE
        if model_cfg.exists():
            base = load_config(model_cfg)
    return load_config(args.config, overrides, base=base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command][0](cfg, args)
    except TexfvError as exc:
        return _fail(exc.code, exc)
    except (ValueError, KeyError) as exc:
        return _fail("InvalidValue", exc)
    except OSError as exc:
        return _fail(IoError.__name__, exc)
    print(json.dumps(result, separators=(",", ":")))
    return 0


def _fail(code: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {code}: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
