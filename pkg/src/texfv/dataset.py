"""Manifest parsing, image loading and stratified train/test splits."""

from __future__ import annotations

import csv
import enum
import os
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    BadLabelId,
    DuplicateImageId,
    EmptyClass,
    IoError,
    MissingColumn,
    UnparsableNumber,
    UnsupportedFormat,
)

TEXTURE_NAMES = (
    "Checked",
    "Denim",
    "Floral",
    "Knitted",
    "Lacelike",
    "None",
    "Polka-dotted",
    "Striped",
    "Zigzagged",
)
NUM_LABELS = len(TEXTURE_NAMES)

COLUMNS = (
    "image_id",
    "label_id",
    "distance_cm",
    "inclination_deg",
    "azimuth_deg",
    "scale_ppcm",
    "lighting",
    "tension",
    "notes",
    "colors",
    "image_path",
)
COLOR_DELIMITER = ";"

LUMA = np.array([0.299, 0.587, 0.114])


class Tension(str, enum.Enum):
    TAUT = "taut"
    HANGING = "hanging"


def label_name(label_id: int) -> str:
    """Texture name for a label id (0 -> "Checked", ..., 8 -> "Zigzagged")."""
    if isinstance(label_id, bool) or not isinstance(label_id, (int, np.integer)):
        raise BadLabelId(f"label id must be an integer, got {label_id!r}")
    if not 0 <= label_id < NUM_LABELS:
        raise BadLabelId(f"label id {label_id} outside 0..{NUM_LABELS - 1}")
    return TEXTURE_NAMES[label_id]


def label_id(name: str) -> int:
    """Inverse of :func:`label_name`."""
    try:
        return TEXTURE_NAMES.index(name)
    except ValueError:
        raise BadLabelId(f"unknown texture name {name!r}") from None


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    label_id: int
    distance_cm: float
    inclination_deg: float
    azimuth_deg: float
    scale_ppcm: float
    lighting: int
    tension: Tension
    notes: str
    colors: tuple[str, ...]
    image_path: Path
    missing: bool = False

    @property
    def texture(self) -> str:
        return label_name(self.label_id)


@dataclass(frozen=True)
class Manifest:
    records: tuple[ImageRecord, ...]
    class_counts: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Iterable[ImageRecord]) -> "Manifest":
        records = tuple(records)
        seen: set[int] = set()
        for rec in records:
            if rec.image_id in seen:
                raise DuplicateImageId(f"image_id {rec.image_id} appears more than once")
            seen.add(rec.image_id)
        hist = Counter(r.label_id for r in records)
        counts = {lab: hist.get(lab, 0) for lab in range(NUM_LABELS)}
        return cls(records=records, class_counts=counts)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def usable(self) -> tuple[ImageRecord, ...]:
        return tuple(r for r in self.records if not r.missing)

    @property
    def num_missing(self) -> int:
        return sum(r.missing for r in self.records)

    def by_id(self) -> dict[int, ImageRecord]:
        return {r.image_id: r for r in self.records}


@dataclass(frozen=True)
class Split:
    train_ids: frozenset[int]
    test_ids: frozenset[int]
    fraction: float
    seed: int


def _number(row: dict, key: str, rowno: int, kind=float):
    raw = (row.get(key) or "").strip()
    try:
        return kind(raw)
    except ValueError:
        raise UnparsableNumber(f"row {rowno}: column {key!r} value {raw!r} is not a valid number") from None


def _parse_row(row: dict, rowno: int, base: Path) -> ImageRecord:
    image_id = _number(row, "image_id", rowno, int)
    if image_id < 0:
        raise UnparsableNumber(f"row {rowno}: image_id {image_id} is negative")
    lab = _number(row, "label_id", rowno, int)
    if not 0 <= lab < NUM_LABELS:
        raise BadLabelId(f"row {rowno}: label_id {lab} outside 0..{NUM_LABELS - 1}")
    distance = _number(row, "distance_cm", rowno)
    scale = _number(row, "scale_ppcm", rowno)
    if not distance > 0:
        raise UnparsableNumber(f"row {rowno}: distance_cm must be positive, got {distance}")
    if not scale > 0:
        raise UnparsableNumber(f"row {rowno}: scale_ppcm must be positive, got {scale}")
    lighting = _number(row, "lighting", rowno, int)
    if not 0 <= lighting <= 255:
        raise UnparsableNumber(f"row {rowno}: lighting {lighting} outside 0..255")
    tension_raw = (row.get("tension") or "").strip().lower()
    try:
        tension = Tension(tension_raw)
    except ValueError:
        raise UnparsableNumber(f"row {rowno}: tension {tension_raw!r} is not taut|hanging") from None
    colors_raw = (row.get("colors") or "").strip()
    colors = tuple(c.strip() for c in colors_raw.split(COLOR_DELIMITER) if c.strip())
    path = Path(os.path.normpath(base / (row.get("image_path") or "").strip()))
    return ImageRecord(
        image_id=image_id,
        label_id=lab,
        distance_cm=distance,
        inclination_deg=_number(row, "inclination_deg", rowno),
        azimuth_deg=_number(row, "azimuth_deg", rowno),
        scale_ppcm=scale,
        lighting=lighting,
        tension=tension,
        notes=row.get("notes") or "",
        colors=colors,
        image_path=path,
        missing=not path.is_file(),
    )


def parse_manifest(csv_path: str | os.PathLike) -> Manifest:
    """Read a manifest CSV. Relative image paths resolve against the CSV's directory.

    Rows whose image file does not exist are kept but flagged ``missing``.
    """
    csv_path = Path(csv_path)
    try:
        fh = open(csv_path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot open manifest {csv_path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in COLUMNS:
            if col not in header:
                raise MissingColumn(f"row 1: header lacks column {col!r}")
        base = csv_path.parent
        records = []
        seen: dict[int, int] = {}
        for rowno, row in enumerate(reader, start=2):
            rec = _parse_row(row, rowno, base)
            if rec.image_id in seen:
                raise DuplicateImageId(
                    f"row {rowno}: image_id {rec.image_id} already used on row {seen[rec.image_id]}"
                )
            seen[rec.image_id] = rowno
            records.append(rec)
    return Manifest.from_records(records)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_manifest(manifest: Manifest, csv_path: str | os.PathLike) -> Path:
    """Write ``manifest`` so that :func:`parse_manifest` reproduces it."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    base = csv_path.parent.absolute()
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in manifest.records:
            path = Path(os.path.relpath(Path(r.image_path).absolute(), base))
            writer.writerow([
                r.image_id,
                r.label_id,
                _fmt(r.distance_cm),
                _fmt(r.inclination_deg),
                _fmt(r.azimuth_deg),
                _fmt(r.scale_ppcm),
                r.lighting,
                r.tension.value,
                r.notes,
                COLOR_DELIMITER.join(r.colors),
                path.as_posix(),
            ])
    return csv_path


def load_image(record_or_path: ImageRecord | str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Load an image as ``(gray, rgb)``.

    ``gray`` is float64 luma in [0, 1]; ``rgb`` is the uint8 H x W x 3 raster.
    """
    path = record_or_path.image_path if isinstance(record_or_path, ImageRecord) else Path(record_or_path)
    try:
        with Image.open(path) as img:
            if img.format not in ("PNG", "JPEG"):
                raise UnsupportedFormat(f"{path}: format {img.format} is not PNG or JPEG")
            img.load()
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormat(f"{path}: not a readable PNG or JPEG") from exc
    except (OSError, SyntaxError) as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(f"{path}: {exc}") from exc
    return rgb_to_gray(rgb), rgb


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    return (rgb.astype(np.float64) @ LUMA) / 255.0


def round_half_up(x: float | Decimal) -> int:
    return int(Decimal(x).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def train_count(fraction: float, n: int) -> int:
    """Number of training items for a class of size ``n``, rounding half up.

    The fraction goes through its shortest decimal repr so 0.35 * 10 gives 4, not 3.
    """
    return round_half_up(Decimal(repr(float(fraction))) * n)


def stratified_split(manifest: Manifest, fraction: float, seed: int) -> Split:
    """Per-class random split with ``round_half_up(fraction * n_c)`` training items.

    Deterministic for a fixed manifest order, fraction and seed. Records flagged
    missing are excluded.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    by_class: dict[int, list[int]] = {}
    for rec in manifest.records:
        by_class.setdefault(rec.label_id, [])
        if not rec.missing:
            by_class[rec.label_id].append(rec.image_id)
    if not by_class:
        raise EmptyClass("manifest has no records")
    for lab, ids in by_class.items():
        if not ids:
            raise EmptyClass(f"class {lab} ({label_name(lab)}) has no usable records")
    rng = np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    train: list[int] = []
    test: list[int] = []
    for lab in sorted(by_class):
        ids = np.array(by_class[lab], dtype=np.int64)
        order = rng.permutation(len(ids))
        k = train_count(fraction, len(ids))
        train.extend(ids[order[:k]].tolist())
        test.extend(ids[order[k:]].tolist())
    return Split(frozenset(train), frozenset(test), float(fraction), int(seed))


def split_ids(split: Split, manifest: Manifest) -> tuple[list[int], list[int]]:
    """Train and test ids in manifest order."""
    train = [r.image_id for r in manifest.records if r.image_id in split.train_ids]
    test = [r.image_id for r in manifest.records if r.image_id in split.test_ids]
    return train, test


def labels_for(manifest: Manifest, ids: Sequence[int]) -> np.ndarray:
    lookup = {r.image_id: r.label_id for r in manifest.records}
    return np.array([lookup[i] for i in ids], dtype=np.int64)
