"""Per-document quality signals, their normalization, and score aggregation.

Three signals are produced for every document in a ranked list: the retriever
cosine, a ranker-style semantic logit, and a query-difficulty (QPP) logit.
The ranker and QPP signals are deterministic proxies with the interface a
learned scorer would have: they emit clamped log-odds, so downstream code can
treat them exactly like model logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Document, QAInstance, canonical_text
from .retrieval import ScoredList
from .util import read_jsonl, rng_for, write_jsonl

LOGIT_CLAMP = 6.0
SCHEMES = ("max", "minmax", "exprank")
AGGREGATIONS = ("ret-only", "ret+rank", "ret+qpp", "all")

# Cosine floor applied before max-normalizing retrieval scores in the
# pipeline: keeps the positive-maximum precondition satisfiable even when a
# degenerate list scores every document non-positive.
RET_FLOOR = 1e-6


def clamped_log_odds(p: float) -> float:
    """log(p / (1-p)) clamped to [-LOGIT_CLAMP, +LOGIT_CLAMP]."""
    lo = 1.0 / (1.0 + np.exp(LOGIT_CLAMP))
    if p <= lo:
        return -LOGIT_CLAMP
    if p >= 1.0 - lo:
        return LOGIT_CLAMP
    return float(np.clip(np.log(p / (1.0 - p)), -LOGIT_CLAMP, LOGIT_CLAMP))


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def _overlap_f1(a_words: Sequence[str], b_words: Sequence[str]) -> float:
    """Multiset token F1 between two word sequences (no article stripping)."""
    if not a_words and not b_words:
        return 1.0
    if not a_words or not b_words:
        return 0.0
    from collections import Counter

    common = Counter(a_words) & Counter(b_words)
    n_same = sum(common.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(a_words)
    recall = n_same / len(b_words)
    return 2 * precision * recall / (precision + recall)


def score_ranker_proxy(
    query: QAInstance,
    doc: Document,
    seed: int,
    noise_scale: float = 0.1,
) -> float:
    """Semantic-overlap logit standing in for a learned ranker.

    Log-odds of the token-level F1 between question and document (clamped at
    +/-LOGIT_CLAMP), plus bounded noise drawn deterministically from
    (seed, qa_id, doc_id). ``noise_scale=0`` disables the noise.
    """
    f1 = _overlap_f1(
        canonical_text(query.question).split(), canonical_text(doc.text).split()
    )
    value = clamped_log_odds(f1)
    if noise_scale:
        rng = rng_for("ranker-noise", seed, query.qa_id, doc.doc_id)
        value += float(rng.uniform(-noise_scale, noise_scale))
    return value


def qpp_from_scores(scores: Sequence[float]) -> np.ndarray:
    """Query-difficulty logits from a list's retrieval-score distribution.

    A shared base logit encodes the population standard deviation of the
    scores (spread-out scores suggest an easy query with a clear winner);
    each document is then perturbed by its deviation from the list mean.
    """
    if len(scores) == 0:
        raise ValueError("ranking must be non-empty")
    arr = np.asarray(scores, dtype=float)
    base = clamped_log_odds(float(arr.std()))
    return base + (arr - arr.mean())


def score_qpp_proxy(query: QAInstance, ranking: ScoredList) -> np.ndarray:
    """Per-document QPP logits for a ranked list.

    The proxy depends only on the ranking's score distribution; the query is
    part of the signature for interface parity with a learned QPP model.
    """
    del query
    return qpp_from_scores([e.score for e in ranking.entries])


@dataclass(frozen=True)
class NormalizedScores:
    values: tuple[float, ...]
    scheme: str


def normalize(scores: Sequence[float], scheme: str) -> NormalizedScores:
    """Normalize a score list under one of the three schemes.

    max:     s_i / max_j s_j               (requires a positive maximum)
    minmax:  (s_i - min) / (max - min)     (all-equal input -> all ones)
    exprank: exp(-0.5 (i-1)) / sum_j ...   (1-based rank i; ignores values)
    """
    if len(scores) == 0:
        raise ValueError("cannot normalize an empty score list")
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    arr = np.asarray(scores, dtype=float)
    if scheme == "max":
        top = arr.max()
        if top <= 0.0:
            raise ValueError(
                f"max normalization needs a positive maximum, got {top}"
            )
        values = arr / top
    elif scheme == "minmax":
        lo, hi = arr.min(), arr.max()
        if lo == hi:
            values = np.ones_like(arr)
        else:
            values = (arr - lo) / (hi - lo)
    else:
        weights = np.exp(-0.5 * np.arange(len(arr)))
        values = weights / weights.sum()
    return NormalizedScores(tuple(float(v) for v in values), scheme)


@dataclass(frozen=True)
class IndicatorBundle:
    """Aligned signal triples for the documents of one presented list."""

    qa_id: str
    doc_ids: tuple[str, ...]
    ret: tuple[float, ...]
    rank_score: tuple[float, ...]
    qpp: tuple[float, ...]

    def __post_init__(self) -> None:
        n = len(self.doc_ids)
        if not (len(self.ret) == len(self.rank_score) == len(self.qpp) == n):
            raise ValueError("indicator families must align with the document list")
        for family in (self.ret, self.rank_score, self.qpp):
            if not all(np.isfinite(family)):
                raise ValueError("indicator values must be finite")

    def __len__(self) -> int:
        return len(self.doc_ids)


def compute_bundle(
    query: QAInstance,
    docs: Sequence[Document],
    ret_scores: Sequence[float],
    seed: int,
    noise_scale: float = 0.1,
) -> IndicatorBundle:
    """All three signals for an ordered document list with known cosines."""
    rank = [score_ranker_proxy(query, d, seed, noise_scale) for d in docs]
    qpp = qpp_from_scores(ret_scores)
    return IndicatorBundle(
        qa_id=query.qa_id,
        doc_ids=tuple(d.doc_id for d in docs),
        ret=tuple(float(s) for s in ret_scores),
        rank_score=tuple(rank),
        qpp=tuple(float(v) for v in qpp),
    )


def _combine(
    families: Sequence[np.ndarray],
    weights: Sequence[float],
    final_scheme: str,
    raw_denominator: bool,
) -> np.ndarray:
    normed = [np.asarray(normalize(f, "max").values) for f in families]
    combined = sum(w * f for w, f in zip(weights, normed))
    if raw_denominator:
        # Alternative reading: normalized families in the numerator, raw
        # family scores in the denominator. Kept for comparison only.
        raw = sum(w * np.asarray(f, dtype=float) for w, f in zip(weights, families))
        top = raw.max()
        if top <= 0.0:
            raise ValueError("raw-denominator aggregation needs a positive maximum")
        return combined / top
    return np.asarray(normalize(combined, final_scheme).values)


def aggregate(
    bundle: IndicatorBundle,
    weight: float = 0.5,
    raw_denominator: bool = False,
) -> np.ndarray:
    """Combine the three signal families into one score per document.

    Each family is max-normalized independently, the retrieval family gets
    unit weight while ranker and QPP contribute ``weight`` each, and the
    combined sequence is max-normalized again so the output peaks at exactly
    1. Any family violating the max-normalization precondition raises.
    """
    if len(bundle) == 0:
        raise ValueError("cannot aggregate an empty bundle")
    return _combine(
        [np.asarray(bundle.ret), np.asarray(bundle.rank_score), np.asarray(bundle.qpp)],
        [1.0, weight, weight],
        "max",
        raw_denominator,
    )


def doc_quality_scores(
    bundle: IndicatorBundle,
    aggregation: str = "all",
    scheme: str = "max",
    weight: float = 0.5,
    raw_denominator: bool = False,
) -> np.ndarray:
    """Pipeline-facing document scores for prompt modulation.

    Logit families (ranker, QPP) are mapped through the logistic sigmoid back
    to (0, 1) and the retrieval cosine is floored at a tiny positive value, so
    every family satisfies the positive-maximum precondition regardless of how
    noisy the presented list is. The final normalization uses ``scheme``.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(
            f"unknown aggregation {aggregation!r}; expected one of {AGGREGATIONS}"
        )
    ret_f = np.maximum(np.asarray(bundle.ret, dtype=float), RET_FLOOR)
    if aggregation == "ret-only":
        return np.asarray(normalize(ret_f, scheme).values)
    rank_f = np.asarray(sigmoid(np.asarray(bundle.rank_score)))
    qpp_f = np.asarray(sigmoid(np.asarray(bundle.qpp)))
    if aggregation == "ret+rank":
        families, weights = [ret_f, rank_f], [1.0, weight]
    elif aggregation == "ret+qpp":
        families, weights = [ret_f, qpp_f], [1.0, weight]
    else:
        families, weights = [ret_f, rank_f, qpp_f], [1.0, weight, weight]
    return _combine(families, weights, scheme, raw_denominator)


def write_indicators(path: str | Path, bundles: Sequence[IndicatorBundle]) -> None:
    write_jsonl(
        path,
        (
            {
                "qa_id": b.qa_id,
                "docs": [
                    {
                        "doc_id": doc_id,
                        "ret": ret,
                        "rank_score": rank,
                        "qpp": qpp,
                    }
                    for doc_id, ret, rank, qpp in zip(
                        b.doc_ids, b.ret, b.rank_score, b.qpp
                    )
                ],
            }
            for b in bundles
        ),
    )


def read_indicators(path: str | Path) -> list[IndicatorBundle]:
    out = []
    for row in read_jsonl(path):
        docs = row["docs"]
        out.append(
            IndicatorBundle(
                qa_id=row["qa_id"],
                doc_ids=tuple(d["doc_id"] for d in docs),
                ret=tuple(d["ret"] for d in docs),
                rank_score=tuple(d["rank_score"] for d in docs),
                qpp=tuple(d["qpp"] for d in docs),
            )
        )
    return out
