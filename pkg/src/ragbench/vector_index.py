"""Exact in-memory vector index.

All stored vectors are unit length, so similarity is computed as a plain
float64 dot product, which equals cosine similarity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import binfmt
from .embedding import EmbeddingVector

INDEX_MAGIC = b"RGIDX1"


class VectorIndexError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IndexEntry:
    chunk_id: str
    vector: EmbeddingVector


@dataclass(frozen=True)
class SearchHit:
    chunk_id: str
    similarity: float


class Index:
    """Immutable flat index; rows keep insertion order."""

    def __init__(self, chunk_ids: list[str], matrix: np.ndarray):
        self.chunk_ids: tuple[str, ...] = tuple(chunk_ids)
        self.matrix = np.array(matrix, dtype=np.float64)
        self.matrix.setflags(write=False)
        self._row = {cid: i for i, cid in enumerate(self.chunk_ids)}
        # rank of each row's id in ascending id order, for tie-breaking
        order = sorted(range(len(self.chunk_ids)), key=self.chunk_ids.__getitem__)
        self._id_rank = np.empty(len(order), dtype=np.int64)
        self._id_rank[order] = np.arange(len(order))

    @property
    def dimension(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def vector(self, chunk_id: str) -> np.ndarray:
        return self.matrix[self._row[chunk_id]]

    def __eq__(self, other):
        if not isinstance(other, Index):
            return NotImplemented
        return (self.chunk_ids == other.chunk_ids
                and self.matrix.shape == other.matrix.shape
                and self.matrix.tobytes() == other.matrix.tobytes())


def build_index(entries: list[IndexEntry]) -> Index:
    if not entries:
        raise VectorIndexError("cannot build an index from zero entries")
    dim = entries[0].vector.dimension
    seen: set[str] = set()
    for e in entries:
        if e.chunk_id in seen:
            raise VectorIndexError(f"duplicate chunk_id {e.chunk_id!r}")
        seen.add(e.chunk_id)
        if e.vector.dimension != dim:
            raise VectorIndexError(f"dimension mismatch for {e.chunk_id!r}: {e.vector.dimension} != {dim}")
    return Index([e.chunk_id for e in entries], np.stack([e.vector.values for e in entries]))


def _query_values(index: Index, query) -> np.ndarray:
    q = query.values if isinstance(query, EmbeddingVector) else np.asarray(query, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise VectorIndexError(f"query dimension {q.shape[-1] if q.ndim else 0} != index dimension {index.dimension}")
    return q


def similarities(index: Index, query) -> np.ndarray:
    sims = index.matrix @ _query_values(index, query)
    return np.clip(sims, -1.0, 1.0)


def search_topk(index: Index, query, k: int) -> list[SearchHit]:
    """Exact top-k by similarity descending, ties by ascending chunk_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sims = similarities(index, query)
    order = np.lexsort((index._id_rank, -sims))[:k]
    return [SearchHit(index.chunk_ids[i], float(sims[i])) for i in order]


def to_bytes(index: Index) -> bytes:
    """Serialize to RGIDX1. Values are stored as f32; embedder output is already f32-exact."""
    return binfmt.encode(INDEX_MAGIC, index.dimension, list(zip(index.chunk_ids, index.matrix)))


def from_bytes(data: bytes) -> Index:
    try:
        dim, records = binfmt.decode(INDEX_MAGIC, data)
    except binfmt.FormatError as exc:
        raise VectorIndexError(str(exc)) from None
    if not records:
        raise VectorIndexError("index file holds zero entries")
    return Index([k for k, _ in records], np.stack([v for _, v in records]).reshape(len(records), dim))


def save(index: Index, path: str | os.PathLike) -> None:
    binfmt.write_atomic(path, to_bytes(index))


def load(path: str | os.PathLike) -> Index:
    return from_bytes(Path(path).read_bytes())
