"""Deterministic bag-of-tokens embeddings and exact top-k cosine retrieval.

Each vocabulary index owns a fixed pseudo-random unit direction; a text embeds
as the L2-normalized sum of its token directions. Order-invariant by
construction, reproducible across runs, and just discriminative enough that
fact documents outrank distractors for their own question.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Document, QAInstance, Vocabulary, tokenize
from .util import read_jsonl, rng_for, write_jsonl

DEFAULT_DIM = 64


def token_direction(index: int, dim: int) -> np.ndarray:
    """Fixed unit vector owned by one vocabulary index."""
    vec = rng_for("token-direction", dim, index).standard_normal(dim)
    return vec / np.linalg.norm(vec)


def embed(tokens: Sequence[int], dim: int = DEFAULT_DIM) -> np.ndarray:
    """Bag-of-tokens embedding; zero vector for an empty sequence."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    total = np.zeros(dim)
    for tok in tokens:
        total += token_direction(int(tok), dim)
    norm = np.linalg.norm(total)
    if norm == 0.0:
        return total
    return total / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class RankedEntry:
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class ScoredList:
    """Top-k ranking for one query, sorted by score with doc_id tie-break."""

    qa_id: str
    entries: tuple[RankedEntry, ...]

    def __post_init__(self) -> None:
        for i, entry in enumerate(self.entries):
            if entry.rank != i + 1:
                raise ValueError(f"ranks must be 1..n without gaps, got {entry.rank} at {i}")
            if i > 0:
                prev = self.entries[i - 1]
                if entry.score > prev.score:
                    raise ValueError("entries must be sorted by score descending")
                if entry.score == prev.score and entry.doc_id < prev.doc_id:
                    raise ValueError("ties must be broken by ascending doc_id")

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(e.doc_id for e in self.entries)

    def head(self, k: int) -> "ScoredList":
        return ScoredList(self.qa_id, self.entries[:k])


class Retriever:
    """Caches document embeddings for repeated queries over one corpus."""

    def __init__(self, documents: Sequence[Document], vocab: Vocabulary, dim: int = DEFAULT_DIM):
        if not documents:
            raise ValueError("corpus must be non-empty")
        self.vocab = vocab
        self.dim = dim
        self.documents = list(documents)
        self._index = {d.doc_id: i for i, d in enumerate(self.documents)}
        if len(self._index) != len(self.documents):
            raise ValueError("duplicate doc_id in corpus")
        self._matrix = np.stack([embed(d.tokens, dim) for d in self.documents])
        self._query_cache: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.documents)

    def query_vector(self, query: QAInstance, allow_unknown: bool = False) -> np.ndarray:
        cached = self._query_cache.get(query.qa_id)
        if cached is None:
            tokens = tokenize(query.question, self.vocab, allow_unknown=allow_unknown)
            cached = embed(tokens, self.dim)
            self._query_cache[query.qa_id] = cached
        return cached

    def score_all(self, query: QAInstance) -> np.ndarray:
        qv = self.query_vector(query)
        return np.clip(self._matrix @ qv, -1.0, 1.0)

    def score_doc(self, query: QAInstance, doc_id: str) -> float:
        return float(self.score_all(query)[self._index[doc_id]])

    def retrieve(self, query: QAInstance, k: int) -> ScoredList:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if k > len(self.documents):
            raise ValueError(f"k={k} exceeds corpus size {len(self.documents)}")
        scores = self.score_all(query)
        order = sorted(
            range(len(self.documents)),
            key=lambda i: (-scores[i], self.documents[i].doc_id),
        )
        entries = tuple(
            RankedEntry(self.documents[i].doc_id, float(scores[i]), rank + 1)
            for rank, i in enumerate(order[:k])
        )
        return ScoredList(query.qa_id, entries)


def retrieve(
    query: QAInstance,
    documents: Sequence[Document],
    k: int,
    vocab: Vocabulary,
    dim: int = DEFAULT_DIM,
) -> ScoredList:
    """One-shot top-k retrieval; see :class:`Retriever` for batched use."""
    return Retriever(documents, vocab, dim).retrieve(query, k)


def write_rankings(path: str | Path, rankings: Sequence[ScoredList]) -> None:
    write_jsonl(
        path,
        (
            {
                "qa_id": r.qa_id,
                "ranking": [
                    {"doc_id": e.doc_id, "score": e.score, "rank": e.rank}
                    for e in r.entries
                ],
            }
            for r in rankings
        ),
    )


def read_rankings(path: str | Path) -> list[ScoredList]:
    out = []
    for row in read_jsonl(path):
        entries = tuple(
            RankedEntry(e["doc_id"], e["score"], e["rank"]) for e in row["ranking"]
        )
        out.append(ScoredList(row["qa_id"], entries))
    return out


def rankings_by_id(rankings: Sequence[ScoredList]) -> Mapping[str, ScoredList]:
    return {r.qa_id: r for r in rankings}
