"""Dense SIFT extraction wall time with 1 worker versus N workers.

    python scripts/worker_benchmark.py --images 32 --workers 4
"""

import argparse
import os
import tempfile

from texfv import evaluation as ev
from texfv import synth
from texfv.embed import FeatureSet


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--images", type=int, default=32, help="multiple of 16")
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--image-size", type=int, default=256)
    args = ap.parse_args()

    classes = synth.SYNTH_CLASSES[: max(1, args.images // 16)]
    with tempfile.TemporaryDirectory() as tmp:
        spec = synth.SynthSpec(classes=classes, articles_per_class=1, image_size=args.image_size, seed=42)
        manifest = synth.generate(spec, tmp)
        items = [(r.image_id, r.image_path) for r in manifest.records]
        rep = ev.measure_extraction_speedup(items, workers=args.workers)
        store = ev.build_features(manifest, (FeatureSet.FUSED,), workers=1)
    print(f"host cores {os.cpu_count()}, images {rep.images}")
    print(f"1 worker   {rep.serial_ms / 1e3:.2f} s")
    print(f"{rep.workers} workers  {rep.parallel_ms / 1e3:.2f} s")
    print(f"speedup {rep.speedup:.2f}x, identical outputs {rep.identical}")
    print(ev.format_timings(store.timer.table()), end="")


if __name__ == "__main__":
    main()
