"""Noisy and extreme document-list construction for robust training and eval.

A noisy list keeps the top n_relevant ranks, swaps in n_partial documents
sampled uniformly from the remaining ranked tail, and n_irrelevant documents
sampled uniformly from the rest of the collection, then applies an order
regime. Every output document carries a provenance tag and a genuine retrieval
score (irrelevant documents are scored on demand rather than sentinel-valued,
so downstream indicators cannot peek at the labels).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .corpus import Document
from .retrieval import ScoredList
from .util import rng_for, write_jsonl

ORDERS = ("original", "reverse", "shuffle")
TAG_RELEVANT = "relevant"
TAG_PARTIAL = "partial"
TAG_IRRELEVANT = "irrelevant"


@dataclass(frozen=True)
class NoisyListSpec:
    n_relevant: int = 5
    n_partial: int = 3
    n_irrelevant: int = 2
    order: str = "original"
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.n_relevant, self.n_partial, self.n_irrelevant) < 0:
            raise ValueError("composition counts must be non-negative")
        if self.order not in ORDERS:
            raise ValueError(f"unknown order {self.order!r}; expected one of {ORDERS}")

    @property
    def total(self) -> int:
        return self.n_relevant + self.n_partial + self.n_irrelevant


@dataclass(frozen=True)
class TaggedDoc:
    doc: Document
    tag: str
    score: float


ScoreFn = Callable[[str], float]


def build_noisy_list(
    ranking: ScoredList,
    corpus: Mapping[str, Document],
    spec: NoisyListSpec,
    score_fn: ScoreFn,
) -> list[TaggedDoc]:
    """Compose one noisy document list for a query.

    ``score_fn`` supplies the retrieval score for irrelevant documents, which
    are drawn from the collection minus the query's full ranked list. Sampling
    and the shuffle permutation are deterministic in (spec.seed, qa_id).
    """
    k = len(ranking.entries)
    if spec.total > k:
        raise ValueError(
            f"composition {spec.n_relevant}/{spec.n_partial}/{spec.n_irrelevant} "
            f"needs {spec.total} documents but the ranking has {k}"
        )
    if len(corpus) <= k:
        raise ValueError("corpus must be strictly larger than the ranked list")

    kept = list(ranking.entries[: spec.n_relevant])
    partial_pool = list(ranking.entries[spec.n_relevant :])
    if spec.n_partial > len(partial_pool):
        raise ValueError(
            f"partial pool has {len(partial_pool)} candidates, need {spec.n_partial}"
        )
    ranked_ids = set(ranking.doc_ids)
    irrelevant_pool = sorted(set(corpus) - ranked_ids)
    if spec.n_irrelevant > len(irrelevant_pool):
        raise ValueError(
            f"irrelevant pool has {len(irrelevant_pool)} candidates, "
            f"need {spec.n_irrelevant}"
        )

    rng = rng_for("noisy-list", spec.seed, ranking.qa_id)
    partial_idx = sorted(
        rng.choice(len(partial_pool), size=spec.n_partial, replace=False).tolist()
    )
    irrelevant_idx = rng.choice(
        len(irrelevant_pool), size=spec.n_irrelevant, replace=False
    ).tolist()

    composed = [
        TaggedDoc(corpus[e.doc_id], TAG_RELEVANT, e.score) for e in kept
    ]
    composed += [
        TaggedDoc(corpus[partial_pool[i].doc_id], TAG_PARTIAL, partial_pool[i].score)
        for i in partial_idx
    ]
    for i in irrelevant_idx:
        doc_id = irrelevant_pool[i]
        composed.append(TaggedDoc(corpus[doc_id], TAG_IRRELEVANT, score_fn(doc_id)))

    return apply_order(composed, spec.order, rng)


def apply_order(docs: list[TaggedDoc], order: str, rng) -> list[TaggedDoc]:
    """Apply an order regime; the shuffle draws from ``rng``."""
    if order == "original":
        return docs
    if order == "reverse":
        return docs[::-1]
    if order == "shuffle":
        perm = rng.permutation(len(docs))
        return [docs[i] for i in perm]
    raise ValueError(f"unknown order {order!r}")


def build_extreme_list(
    ranking: ScoredList,
    corpus: Mapping[str, Document],
    k: int,
    seed: int,
    score_fn: ScoreFn,
) -> list[TaggedDoc]:
    """k documents sampled uniformly from the collection minus the top-k."""
    pool = sorted(set(corpus) - set(ranking.doc_ids))
    if len(pool) < k:
        raise ValueError(
            f"collection minus top-k has {len(pool)} documents, need {k}"
        )
    rng = rng_for("extreme-list", seed, ranking.qa_id)
    picks = rng.choice(len(pool), size=k, replace=False).tolist()
    return [TaggedDoc(corpus[pool[i]], TAG_IRRELEVANT, score_fn(pool[i])) for i in picks]


def write_noisy_lists(
    path: str | Path,
    lists: Sequence[tuple[str, Sequence[TaggedDoc]]],
    seed: int,
    order: str,
) -> None:
    write_jsonl(
        path,
        (
            {
                "qa_id": qa_id,
                "docs": [
                    {"doc_id": td.doc.doc_id, "tag": td.tag, "position": pos + 1}
                    for pos, td in enumerate(docs)
                ],
                "seed": seed,
                "order": order,
            }
            for qa_id, docs in lists
        ),
    )
