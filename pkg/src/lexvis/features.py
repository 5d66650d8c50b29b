"""Per-image feature storage and per-token image tensor assembly.

Feature vectors are precomputed by a frozen external extractor and shipped in
a compact binary file; nothing here runs a CNN. The binary layout is
little-endian:

    magic   4 bytes  b"LVF1"
    count   u32      number of records
    dim     u32      feature dimensionality
    record  u16 id-length, id bytes (UTF-8), dim float32 values

The assembled per-sentence tensor is ``n x m x dim`` with a boolean validity
mask; slots beyond a token's retrieved images are zero-filled with mask False.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .dictionary import WordImageDictionary, lookup

MAGIC = b"LVF1"


class FeatureFileError(ValueError):
    """Feature file is truncated, inconsistent, or holds non-finite values."""


class FeatureLookupError(KeyError):
    """A retrieved image id is missing from the feature store."""


@dataclass
class ImageFeatureStore:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.vectors


@dataclass
class ImageTensor:
    """Stacked image features per token: values ``n x m x dim``, mask ``n x m``."""

    values: np.ndarray
    mask: np.ndarray


def save_feature_store(store: ImageFeatureStore, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(store.vectors), store.dim))
        for image_id, vec in store.vectors.items():
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())


def load_feature_store(path: str) -> ImageFeatureStore:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise FeatureFileError(f"{path}: truncated header")
    count, dim = struct.unpack_from("<II", data, 4)
    offset = 12
    vectors: dict[str, np.ndarray] = {}
    for rec in range(count):
        if offset + 2 > len(data):
            raise FeatureFileError(f"{path}: truncated at record {rec} (id length)")
        (id_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        if offset + id_len + 4 * dim > len(data):
            raise FeatureFileError(f"{path}: truncated at record {rec}")
        image_id = data[offset : offset + id_len].decode("utf-8")
        offset += id_len
        vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
        offset += 4 * dim
        if not np.all(np.isfinite(vec)):
            raise FeatureFileError(f"{path}: non-finite value in record {rec} ({image_id!r})")
        vectors[image_id] = vec
    if offset != len(data):
        raise FeatureFileError(
            f"{path}: {len(data) - offset} trailing bytes after {count} records"
        )
    return ImageFeatureStore(dim=dim, vectors=vectors)


def pool(grid: np.ndarray) -> np.ndarray:
    """Mean over the first axis of a ``p x dim`` grid; identity for p = 1."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] < 1:
        raise ValueError(f"expected a non-empty 2-axis grid, got shape {grid.shape}")
    return grid.mean(axis=0)


def assemble_image_tensor(
    d: WordImageDictionary,
    store: ImageFeatureStore,
    tokens: list[str],
    m: int,
    paired_id: str | None = None,
) -> ImageTensor:
    """Stack retrieved feature vectors per token, zero-padded to ``m`` slots.

    Row i holds the vectors of ``lookup(d, tokens[i], m)`` in order. When
    ``paired_id`` is given (a corpus sentence's own image), its vector fills
    slot 0 of every row and retrieval fills the remaining slots, skipping a
    duplicate of the paired id.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    n = len(tokens)
    values = np.zeros((n, m, store.dim), dtype=np.float32)
    mask = np.zeros((n, m), dtype=bool)
    for i, token in enumerate(tokens):
        if paired_id is None:
            ids = lookup(d, token, m)
        else:
            retrieved = [r for r in lookup(d, token, m) if r != paired_id]
            ids = [paired_id] + retrieved[: m - 1]
        for j, image_id in enumerate(ids):
            vec = store.vectors.get(image_id)
            if vec is None:
                raise FeatureLookupError(
                    f"token {token!r}: image id {image_id!r} not in feature store"
                )
            values[i, j] = vec
            mask[i, j] = True
    return ImageTensor(values=values, mask=mask)
