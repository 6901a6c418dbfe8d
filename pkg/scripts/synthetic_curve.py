"""Accuracy versus training fraction on the synthetic five-texture set.

Generates the images, extracts features once, runs the fold protocol and writes
results.csv, folds.csv, figure14.svg, config.txt and timings.txt.

    python scripts/synthetic_curve.py --out runs/synth            # 13 fractions x 40 folds
    python scripts/synthetic_curve.py --out runs/quick --fractions 0.2,0.8 --folds 10
"""

import argparse
import os
import time
from pathlib import Path

from texfv import evaluation as ev
from texfv import synth
from texfv.dataset import parse_manifest
from texfv.embed import FeatureSet


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--image-size", type=int, default=256)
    ap.add_argument("--fractions", default=",".join(map(str, ev.DEFAULT_FRACTIONS)))
    ap.add_argument("--folds", type=int, default=40)
    ap.add_argument("--feature-sets", default="embedding,ifv,fused")
    ap.add_argument("--K", type=int, default=160)
    ap.add_argument("--gmm-pool", type=int, default=10000)
    ap.add_argument("--max-descriptors", type=int, default=500)
    ap.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    args = ap.parse_args()

    t0 = time.perf_counter()
    manifest_path = args.out / "data" / "manifest.csv"
    if manifest_path.exists():
        manifest = parse_manifest(manifest_path)
    else:
        manifest = synth.generate(synth.SynthSpec(image_size=args.image_size, seed=args.seed), args.out / "data")
    feature_sets = tuple(FeatureSet.parse(s) for s in args.feature_sets.split(","))
    store = ev.build_features(manifest, feature_sets, workers=args.workers, max_descriptors=args.max_descriptors,
                              seed=args.seed)
    print(f"features for {len(manifest)} images in {time.perf_counter() - t0:.0f} s", flush=True)

    fractions = tuple(float(f) for f in args.fractions.split(","))
    cfg = ev.EvalConfig(fractions=fractions, folds=args.folds, feature_sets=feature_sets, seed=args.seed, K=args.K,
                        gmm_pool=args.gmm_pool, workers=args.workers)
    report = ev.run_protocol(manifest, store, cfg)
    if len(fractions) >= 4:
        report = ev.flag_outliers(report)
    ev.emit_report(report, args.out)
    for row in report.summary:
        flag = " outlier" if row.outlier else ""
        print(f"{row.feature_set.value:>9}  {row.fraction:.2f}  {row.mean_accuracy:.4f} +- {row.stddev:.4f}{flag}")
    print(f"total {time.perf_counter() - t0:.0f} s; outputs in {args.out}")


if __name__ == "__main__":
    main()
