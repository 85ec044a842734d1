"""Text embeddings: a deterministic offline stub, remote endpoints, and a disk cache.

Every vector that leaves this module is L2-normalized and rounded to
float32 precision (held in float64 arrays), so cache and index files
written as f32 reload bit-for-bit.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import httpx
import numpy as np

from . import binfmt
from .chunking import tokenize
from .transport import JsonClient, ProviderError

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"RGEMB1"
_PUNCT = "\"'`.,;:!?()[]{}<>*_#|/\\-"


class EmbeddingError(ValueError):
    pass


class Provider(str, Enum):
    REMOTE = "remote"
    STUB = "stub"


@dataclass(frozen=True)
class EmbedderSpec:
    provider: Provider
    model_name: str
    endpoint_url: str = ""
    # None for remote means: adopt whatever the first response returns
    dimension: int | None = None
    seed: int = 0
    dialect: str = "normalized"

    def __post_init__(self):
        object.__setattr__(self, "provider", Provider(self.provider))
        if self.dimension is not None and self.dimension < 2:
            raise ValueError("dimension must be >= 2")
        if self.provider == Provider.STUB and self.dimension is None:
            raise ValueError("stub embedder needs an explicit dimension")
        if self.provider == Provider.REMOTE and not self.endpoint_url:
            raise ValueError("remote embedder needs an endpoint_url")
        if self.dialect not in _DIALECTS:
            raise ValueError(f"unknown embedding dialect {self.dialect!r}")


class EmbeddingVector:
    """Unit-length vector plus the cache key of the text it came from."""

    __slots__ = ("values", "key", "degenerate")

    def __init__(self, values: np.ndarray, key: str = "", degenerate: bool = False):
        values = np.array(values, dtype=np.float64)
        values.setflags(write=False)
        self.values = values
        self.key = key
        self.degenerate = degenerate

    @classmethod
    def from_raw(cls, raw: Sequence[float] | np.ndarray, key: str = "", *,
                 float32: bool = False) -> "EmbeddingVector":
        """Normalize ``raw``; an all-zero input maps to the first basis vector."""
        v = np.asarray(raw, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise EmbeddingError(f"expected a 1-D vector of length >= 2, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise EmbeddingError("vector contains non-finite values")
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            e0 = np.zeros_like(v)
            e0[0] = 1.0
            return cls(e0, key, degenerate=True)
        v = v / norm
        if float32:
            v = v.astype(np.float32).astype(np.float64)
        return cls(v, key)

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return self.key == other.key and self.values.tobytes() == other.values.tobytes()

    def __repr__(self):
        return f"EmbeddingVector(dim={self.dimension}, key={self.key[:12]!r}, degenerate={self.degenerate})"


def content_key(model_name: str, text: str) -> str:
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return f"{model_name}:{digest}"


def _stub_terms(text: str) -> list[str]:
    terms = []
    for tok in tokenize(text.lower()):
        tok = tok.strip(_PUNCT)
        if tok:
            terms.append(tok)
    return terms


def _seeded_hash(seed: int, term: str) -> int:
    h = hashlib.blake2b(term.encode("utf-8"), digest_size=8, key=struct.pack("<q", seed))
    return int.from_bytes(h.digest(), "little")


def stub_embed(seed: int, dimension: int, text: str, model_name: str = "stub") -> EmbeddingVector:
    """Signed feature hashing of lowercased, punctuation-trimmed tokens.

    Bit 0 of the seeded 64-bit hash gives the sign, the remaining bits
    pick the bucket; counts accumulate before normalization.
    """
    if dimension < 2:
        raise ValueError("dimension must be >= 2")
    raw = np.zeros(dimension, dtype=np.float64)
    for term in _stub_terms(text):
        h = _seeded_hash(seed, term)
        raw[(h >> 1) % dimension] += -1.0 if h & 1 else 1.0
    return EmbeddingVector.from_raw(raw, content_key(model_name, text), float32=True)


# --- remote dialects -------------------------------------------------------
# Each maps (model, texts) to a request body and a response payload to a
# list of raw vectors; the internal contract is the "normalized" shape.

def _req_input(model: str, texts: list[str]) -> dict:
    return {"model": model, "input": texts}


def _req_hf(model: str, texts: list[str]) -> dict:
    return {"inputs": texts}


def _resp_normalized(payload: Any) -> list:
    return payload["vectors"]


def _resp_ollama(payload: Any) -> list:
    return payload["embeddings"]


def _resp_openai(payload: Any) -> list:
    return [item["embedding"] for item in sorted(payload["data"], key=lambda d: d.get("index", 0))]


def _resp_hf(payload: Any) -> list:
    return payload


_DIALECTS = {
    "normalized": (_req_input, _resp_normalized),
    "ollama": (_req_input, _resp_ollama),
    "openai": (_req_input, _resp_openai),
    "hf": (_req_hf, _resp_hf),
}


class RemoteEmbedder:
    """Batched, bounded-concurrency client for one embedding endpoint."""

    def __init__(self, spec: EmbedderSpec, *, batch_size: int = 32, max_in_flight: int = 4,
                 retries: int = 3, backoff: float = 0.5,
                 transport: httpx.BaseTransport | None = None):
        self.spec = spec
        self.batch_size = batch_size
        self.max_in_flight = max_in_flight
        self.dimension = spec.dimension
        self._client = JsonClient(spec.endpoint_url, retries=retries, backoff=backoff, transport=transport)
        self._build, self._parse = _DIALECTS[spec.dialect]
        self._dim_lock = threading.Lock()

    def build_request(self, texts: list[str]) -> dict:
        return self._build(self.spec.model_name, texts)

    def _embed_one_batch(self, texts: list[str]) -> list[np.ndarray]:
        payload = self._client.post(self.build_request(texts))
        try:
            raw = [np.asarray(v, dtype=np.float64) for v in self._parse(payload)]
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed embedding response: {exc!r}") from None
        if len(raw) != len(texts):
            raise ProviderError(f"asked for {len(texts)} embeddings, got {len(raw)}")
        with self._dim_lock:
            for v in raw:
                if self.dimension is None:
                    self.dimension = v.shape[0]
                if v.shape != (self.dimension,):
                    raise EmbeddingError(f"dimension mismatch: got {v.shape[0]}, expected {self.dimension}")
        return raw

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        batches = [texts[i:i + self.batch_size] for i in range(0, len(texts), self.batch_size)]
        if len(batches) == 1:
            return self._embed_one_batch(batches[0])
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            results = list(pool.map(self._embed_one_batch, batches))
        return [v for batch in results for v in batch]

    def close(self) -> None:
        self._client.close()


class EmbeddingCache:
    """Content-addressed, write-through vector store backed by one RGEMB1 file."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.dimension: int | None = None
        self._records: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            dim, records = binfmt.decode(CACHE_MAGIC, self.path.read_bytes())
            self.dimension = dim
            self._records = dict(records)

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: str) -> np.ndarray | None:
        return self._records.get(key)

    def put_many(self, items: list[tuple[str, np.ndarray]]) -> None:
        if not items:
            return
        with self._lock:
            for key, vec in items:
                if self.dimension is None:
                    self.dimension = vec.shape[0]
                if vec.shape != (self.dimension,):
                    raise EmbeddingError(f"cache holds dimension {self.dimension}, got {vec.shape[0]}")
                self._records.setdefault(key, vec)
            payload = binfmt.encode(CACHE_MAGIC, self.dimension, list(self._records.items()))
            binfmt.write_atomic(self.path, payload)


def embed_batch(spec: EmbedderSpec, texts: Sequence[str], *, cache: EmbeddingCache | None = None,
                remote: RemoteEmbedder | None = None) -> list[EmbeddingVector]:
    """Embed ``texts`` in order, serving repeats from ``cache`` and writing misses through."""
    if not texts:
        raise ValueError("texts must be non-empty")
    keys = [content_key(spec.model_name, t) for t in texts]
    found: dict[str, EmbeddingVector] = {}
    if cache is not None:
        for key in keys:
            hit = cache.get(key)
            if hit is not None:
                found[key] = EmbeddingVector(hit, key)

    missing: dict[str, str] = {}
    for key, text in zip(keys, texts):
        if key not in found:
            missing.setdefault(key, text)

    if missing:
        miss_keys = list(missing)
        if spec.provider == Provider.STUB:
            fresh = [stub_embed(spec.seed, spec.dimension, missing[k], spec.model_name) for k in miss_keys]
        else:
            if remote is None:
                remote = RemoteEmbedder(spec)
            raw = remote.embed([missing[k] for k in miss_keys])
            fresh = []
            for k, v in zip(miss_keys, raw):
                vec = EmbeddingVector.from_raw(v, k, float32=True)
                if vec.degenerate:
                    logger.warning("zero vector from %s for key %s; using first basis vector", spec.model_name, k)
                fresh.append(vec)
        for vec in fresh:
            if spec.dimension is not None and vec.dimension != spec.dimension:
                raise EmbeddingError(f"dimension mismatch: got {vec.dimension}, expected {spec.dimension}")
            found[vec.key] = vec
        if cache is not None:
            cache.put_many([(v.key, v.values) for v in fresh])

    return [found[k] for k in keys]
