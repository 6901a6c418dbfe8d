"""Precomputed CNN embeddings keyed by image id, and fusion with Fisher vectors.

The CNN itself is not run here. Any external tool may write an ``EMB1`` file
(or a CSV ``image_id,v0,...,v{dim-1}``) for the images in a manifest.
"""

from __future__ import annotations

import csv
import enum
import functools
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .encode import FisherVector, l2_normalize
from .errors import BadMagic, DimMismatch, DuplicateId, IoError

EMBED_DIM = 4096
# recorded in every report header
FUSION_NORMALIZATION = "per-block: ifv signed-sqrt+L2, embedding L2, concatenation not renormalised"
_EMB_MAGIC = b"EMB1"


class FeatureSet(str, enum.Enum):
    EMBEDDING_ONLY = "embedding"
    IFV_ONLY = "ifv"
    FUSED = "fused"

    @classmethod
    def parse(cls, name: str) -> "FeatureSet":
        aliases = {
            "embeddingonly": cls.EMBEDDING_ONLY,
            "ifvonly": cls.IFV_ONLY,
            "ifv+embedding": cls.FUSED,
        }
        key = name.strip().lower().replace("_", "").replace("-", "")
        for member in cls:
            if key == member.value:
                return member
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown feature set {name!r}")


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    entries: Mapping[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, image_id: int) -> np.ndarray:
        return self.entries[image_id]

    def __contains__(self, image_id: int) -> bool:
        return image_id in self.entries


@dataclass(frozen=True)
class FusedVector:
    data: np.ndarray
    block_boundary: int

    def __len__(self) -> int:
        return len(self.data)


def _build_table(dim: int, rows) -> EmbeddingTable:
    entries: dict[int, np.ndarray] = {}
    for image_id, vec in rows:
        if image_id in entries:
            raise DuplicateId(f"image_id {image_id} appears more than once")
        if len(vec) != dim:
            raise DimMismatch(f"image_id {image_id}: row has {len(vec)} values, header says {dim}")
        entries[image_id] = np.asarray(vec, dtype=np.float64)
    return EmbeddingTable(dim, entries)


def _read_binary(raw: bytes, path) -> EmbeddingTable:
    if len(raw) < 16:
        raise IoError(f"{path}: truncated header")
    dim, count = struct.unpack_from("<IQ", raw, 4)
    row_bytes = 8 + 4 * dim
    if len(raw) != 16 + count * row_bytes:
        # rows carry no length of their own; a short or long row shows up as a size error
        (first_id,) = struct.unpack_from("<Q", raw, 16) if len(raw) >= 24 else (None,)
        raise DimMismatch(
            f"{path}: {len(raw) - 16} payload bytes do not hold {count} rows of dim {dim} "
            f"(first image_id {first_id})"
        )
    rows = []
    for i in range(count):
        off = 16 + i * row_bytes
        (image_id,) = struct.unpack_from("<Q", raw, off)
        rows.append((int(image_id), np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 8)))
    return _build_table(dim, rows)


def _read_csv(path) -> EmbeddingTable:
    with open(path, newline="", encoding="utf-8", errors="replace") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader, None)
        except csv.Error:
            header = None
        if not header or header[0].strip() != "image_id":
            raise BadMagic(f"{path}: neither EMB1 binary nor CSV with an image_id header")
        dim = len(header) - 1

        def rows():
            for line in reader:
                if not line:
                    continue
                yield int(line[0]), [float(v) for v in line[1:]]

        return _build_table(dim, rows())


def load_embeddings(path: str | os.PathLike) -> EmbeddingTable:
    """Read an ``EMB1`` binary file or an ``image_id,v0,...`` CSV."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(4)
            if head == _EMB_MAGIC:
                return _read_binary(head + fh.read(), path)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return _read_csv(path)


def save_embeddings(table: EmbeddingTable, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<IQ", table.dim, len(table)))
        for image_id in sorted(table.entries):
            fh.write(struct.pack("<Q", image_id))
            fh.write(np.asarray(table.entries[image_id], dtype="<f4").tobytes())


def save_embeddings_csv(table: EmbeddingTable, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id"] + [f"v{i}" for i in range(table.dim)])
        for image_id in sorted(table.entries):
            w.writerow([image_id] + [repr(float(v)) for v in table.entries[image_id]])


def fuse(ifv: FisherVector, embedding: np.ndarray) -> FusedVector:
    """``[ifv | embedding / ||embedding||]``; a zero embedding stays zero."""
    if not ifv.normalized:
        raise ValueError("fuse expects a normalised Fisher vector")
    emb = l2_normalize(np.asarray(embedding, dtype=np.float64))
    return FusedVector(np.concatenate([ifv.data, emb]), block_boundary=len(ifv.data))


def feature_vector(feature_set: FeatureSet, ifv: FisherVector | None, embedding: np.ndarray | None) -> np.ndarray:
    """Classifier input for one image under the chosen feature set."""
    if feature_set is FeatureSet.IFV_ONLY:
        return ifv.data
    if feature_set is FeatureSet.EMBEDDING_ONLY:
        return l2_normalize(np.asarray(embedding, dtype=np.float64))
    return fuse(ifv, embedding).data


# --- stand-in embedding ----------------------------------------------------------


@functools.lru_cache(maxsize=4)
def _projection(out_dim: int, in_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, out_dim, in_dim])
    return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


def standin_embedding(mean_descriptor: np.ndarray, dim: int = EMBED_DIM, seed: int = 0) -> np.ndarray:
    """STAND-IN, not a CNN feature: fixed seeded random projection of a mean-pooled descriptor.

    Lets the embedding-only and fused pipelines run on data that has no real
    network activations.
    """
    v = np.asarray(mean_descriptor, dtype=np.float64)
    return _projection(dim, len(v), seed) @ v


def standin_table(means: Mapping[int, np.ndarray], dim: int = EMBED_DIM, seed: int = 0) -> EmbeddingTable:
    return EmbeddingTable(dim, {i: standin_embedding(m, dim, seed) for i, m in means.items()})
