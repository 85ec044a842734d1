"""Context selection: plain top-k or greedy Maximal Marginal Relevance."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .vector_index import Index, search_topk

logger = logging.getLogger(__name__)


class RetrievalStrategy(str, Enum):
    TOPK = "topk"
    MMR = "mmr"


@dataclass(frozen=True)
class RetrievalParams:
    strategy: RetrievalStrategy = RetrievalStrategy.TOPK
    k: int = 3
    lambda_: float = 0.5
    candidate_pool: int = 20

    def __post_init__(self):
        object.__setattr__(self, "strategy", RetrievalStrategy(self.strategy))
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.lambda_ <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.candidate_pool < self.k:
            raise ValueError("candidate_pool must be >= k")


@dataclass(frozen=True)
class Selection:
    chunk_id: str
    query_similarity: float
    selection_score: float


@dataclass(frozen=True)
class RetrievalResult:
    selected: tuple[Selection, ...]
    strategy_used: RetrievalStrategy
    warnings: tuple[str, ...] = field(default=())

    @property
    def chunk_ids(self) -> list[str]:
        return [s.chunk_id for s in self.selected]

    def to_json(self) -> dict:
        return {
            "strategy_used": self.strategy_used.value,
            "selected": [
                {"chunk_id": s.chunk_id, "query_similarity": s.query_similarity,
                 "selection_score": s.selection_score}
                for s in self.selected
            ],
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RetrievalResult":
        return cls(
            tuple(Selection(s["chunk_id"], s["query_similarity"], s["selection_score"]) for s in obj["selected"]),
            RetrievalStrategy(obj["strategy_used"]),
            tuple(obj.get("warnings", ())),
        )


def _empty(strategy: RetrievalStrategy) -> RetrievalResult:
    logger.warning("retrieval against an empty index")
    return RetrievalResult((), strategy, ("empty index",))


def retrieve_topk(index: Index | None, query_vec, k: int) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    if index is None or len(index) == 0:
        return _empty(RetrievalStrategy.TOPK)
    hits = search_topk(index, query_vec, k)
    return RetrievalResult(
        tuple(Selection(h.chunk_id, h.similarity, h.similarity) for h in hits),
        RetrievalStrategy.TOPK,
    )


def retrieve_mmr(index: Index | None, query_vec, params: RetrievalParams) -> RetrievalResult:
    """Greedy MMR over the ``candidate_pool`` most similar chunks.

    The first pick is the most similar chunk (recorded score
    ``lambda * sim``). Each later pick maximizes
    ``lambda * sim(q, d) - (1 - lambda) * max_s sim(d, s)``; equal scores
    go to the smaller chunk_id. Negative scores are still picked.
    """
    if params.strategy != RetrievalStrategy.MMR:
        raise ValueError("retrieve_mmr needs params.strategy == 'mmr'")
    if index is None or len(index) == 0:
        return _empty(RetrievalStrategy.MMR)
    lam = params.lambda_
    pool = search_topk(index, query_vec, params.candidate_pool)
    ids = [h.chunk_id for h in pool]
    qsim = np.array([h.similarity for h in pool])
    vecs = np.stack([index.vector(cid) for cid in ids])
    pairwise = vecs @ vecs.T

    # pool is already ordered by (-sim, id), so index 0 is the argmax
    chosen = [0]
    scores = [lam * qsim[0]]
    max_sim = pairwise[0].copy()
    remaining = set(range(1, len(ids)))
    while remaining and len(chosen) < params.k:
        best, best_score = None, None
        for j in remaining:
            s = lam * qsim[j] - (1.0 - lam) * max_sim[j]
            if best is None or s > best_score or (s == best_score and ids[j] < ids[best]):
                best, best_score = j, s
        chosen.append(best)
        scores.append(best_score)
        remaining.discard(best)
        np.maximum(max_sim, pairwise[best], out=max_sim)

    return RetrievalResult(
        tuple(Selection(ids[i], float(qsim[i]), float(sc)) for i, sc in zip(chosen, scores)),
        RetrievalStrategy.MMR,
    )


def retrieve(index: Index | None, query_vec, params: RetrievalParams) -> RetrievalResult:
    if params.strategy == RetrievalStrategy.MMR:
        return retrieve_mmr(index, query_vec, params)
    return retrieve_topk(index, query_vec, params.k)
