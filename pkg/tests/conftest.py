import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from texfv.dataset import TEXTURE_NAMES, ImageRecord, Manifest, Tension, write_manifest  # noqa: E402

TABLE1_COUNTS = {0: 88, 1: 40, 2: 88, 3: 32, 4: 48, 5: 48, 6: 48, 7: 64, 8: 64}


def make_record(image_id, label, path, **kw):
    base = dict(
        image_id=image_id,
        label_id=label,
        distance_cm=5.0,
        inclination_deg=90.0,
        azimuth_deg=90.0,
        scale_ppcm=128.0,
        lighting=200,
        tension=Tension.TAUT,
        notes="",
        colors=("blue", "white"),
        image_path=Path(path),
        missing=False,
    )
    base.update(kw)
    return ImageRecord(**base)


def table1_manifest(image_dir: Path | None = None) -> Manifest:
    """A manifest with the per-class image counts of the reference dataset (no real images)."""
    recs = []
    i = 0
    for label, n in TABLE1_COUNTS.items():
        for _ in range(n):
            path = (image_dir or Path("/nonexistent")) / f"{TEXTURE_NAMES[label].lower()}_{i:05d}.png"
            recs.append(make_record(i, label, path))
            i += 1
    return Manifest.from_records(recs)


@pytest.fixture
def table1():
    return table1_manifest()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_table1(tmp_path):
    def _write(rows=None):
        m = table1_manifest(tmp_path)
        return write_manifest(m, tmp_path / "manifest.csv"), m

    return _write
