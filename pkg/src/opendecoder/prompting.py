"""Segmented prompt assembly and the token-level score matrix.

A prompt is BOS + instruction + SEP + doc_1 + SEP + ... + doc_k + SEP +
query + SEP (+ answer + EOS when training). Separators belong to the segment
they terminate. Every token inherits its segment's quality score; instruction,
query, and answer tokens are pinned at 1, and the per-token vector broadcast
over the key axis forms the square matrix that multiplies attention logits.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, SEP_ID, Document, QAInstance, Vocabulary, tokenize
from .indicators import NormalizedScores

# Instruction wording used by default for every prompt; configurable per run.
DEFAULT_INSTRUCTION = (
    "You should answer the question by referring to the retrieved knowledge "
    "provided below and integrating the usefulness of your own parametric "
    "knowledge. Just directly answer it as a short answer without any "
    "explanation."
)

# Shorter wording for compute-constrained runs.
COMPACT_INSTRUCTION = "answer the question using the retrieved documents"

# Scores are floored to keep matrix entries strictly positive: a zero entry
# would erase its column's logits entirely, and the additive variant needs
# log(score) to stay finite.
SCORE_FLOOR = 1e-6

INSTRUCTION = "instruction"
DOC = "doc"
QUERY = "query"
ANSWER = "answer"


class PromptTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    kind: str
    start: int
    end: int  # half-open
    score: float
    rank: int | None = None  # 1-based document rank, docs only


@dataclass(frozen=True)
class SegmentedPrompt:
    tokens: tuple[int, ...]
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        cursor = 0
        for seg in self.segments:
            if seg.start != cursor or seg.end <= seg.start:
                raise ValueError("segments must tile the token sequence in order")
            cursor = seg.end
        if cursor != len(self.tokens):
            raise ValueError("segments must cover the full token sequence")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def doc_segments(self) -> tuple[Segment, ...]:
        return tuple(s for s in self.segments if s.kind == DOC)

    @property
    def answer_segment(self) -> Segment | None:
        for seg in self.segments:
            if seg.kind == ANSWER:
                return seg
        return None


@dataclass(frozen=True)
class ScoreMatrix:
    """Key-side broadcast of per-token scores: entry (i, j) = score of token j."""

    token_scores: np.ndarray

    @property
    def n(self) -> int:
        return len(self.token_scores)

    @property
    def entries(self) -> np.ndarray:
        return np.tile(self.token_scores, (self.n, 1))


def build_prompt(
    instruction: str,
    docs: Sequence[Document],
    query: QAInstance,
    vocab: Vocabulary,
    answer_tokens: Sequence[int] | None = None,
    doc_scores: Sequence[float] | None = None,
    max_context: int | None = None,
    no_rag: bool = False,
) -> SegmentedPrompt:
    """Assemble the segmented token sequence for one query.

    ``doc_scores`` default to 1.0 per document; instruction and query segments
    always score exactly 1. An Answer segment (ending in EOS, score 1) is
    present iff ``answer_tokens`` is given.
    """
    if not docs and not no_rag:
        raise ValueError("document list is empty; pass no_rag=True for a no-RAG prompt")
    if doc_scores is not None and len(doc_scores) != len(docs):
        raise ValueError(
            f"got {len(doc_scores)} doc scores for {len(docs)} documents"
        )

    tokens: list[int] = [BOS_ID]
    segments: list[Segment] = []

    instr = tokenize(instruction, vocab)
    tokens.extend(instr)
    tokens.append(SEP_ID)
    segments.append(Segment(INSTRUCTION, 0, len(tokens), 1.0))

    for i, doc in enumerate(docs):
        start = len(tokens)
        tokens.extend(doc.tokens)
        tokens.append(SEP_ID)
        score = 1.0 if doc_scores is None else float(doc_scores[i])
        if not 0.0 < score <= 1.0:
            raise ValueError(f"document score must be in (0, 1], got {score}")
        segments.append(Segment(DOC, start, len(tokens), score, rank=i + 1))

    start = len(tokens)
    tokens.extend(tokenize(query.question, vocab))
    tokens.append(SEP_ID)
    segments.append(Segment(QUERY, start, len(tokens), 1.0))

    if answer_tokens is not None:
        start = len(tokens)
        tokens.extend(int(t) for t in answer_tokens)
        tokens.append(EOS_ID)
        segments.append(Segment(ANSWER, start, len(tokens), 1.0))

    if max_context is not None and len(tokens) > max_context:
        raise PromptTooLongError(
            f"prompt length {len(tokens)} exceeds context limit {max_context}"
        )
    return SegmentedPrompt(tuple(tokens), tuple(segments))


def with_doc_scores(prompt: SegmentedPrompt, doc_scores: Sequence[float]) -> SegmentedPrompt:
    """Copy of ``prompt`` with document segment scores replaced, in rank order."""
    doc_segs = prompt.doc_segments
    if len(doc_scores) != len(doc_segs):
        raise ValueError(
            f"got {len(doc_scores)} doc scores for {len(doc_segs)} document segments"
        )
    it = iter(doc_scores)
    segments = tuple(
        replace(seg, score=float(next(it))) if seg.kind == DOC else seg
        for seg in prompt.segments
    )
    return SegmentedPrompt(prompt.tokens, segments)


def expand_scores(
    prompt: SegmentedPrompt,
    doc_scores: NormalizedScores | Sequence[float] | None = None,
) -> ScoreMatrix:
    """Expand segment scores into the token-level score matrix.

    Every token inherits its segment score; answer tokens score 1. Scores are
    clipped into [SCORE_FLOOR, 1] so matrix entries stay strictly positive.
    """
    if isinstance(doc_scores, NormalizedScores):
        doc_scores = doc_scores.values
    doc_segs = prompt.doc_segments
    if doc_scores is not None and len(doc_scores) != len(doc_segs):
        raise ValueError(
            f"got {len(doc_scores)} doc scores for {len(doc_segs)} document segments"
        )

    vec = np.ones(len(prompt.tokens))
    for i, seg in enumerate(prompt.doc_segments):
        score = seg.score if doc_scores is None else float(doc_scores[i])
        vec[seg.start : seg.end] = np.clip(score, SCORE_FLOOR, 1.0)
    return ScoreMatrix(vec)


def dump_prompt(prompt: SegmentedPrompt, vocab: Vocabulary) -> str:
    """Debug view: one token per line with its segment kind and score."""
    lines = []
    for seg in prompt.segments:
        for pos in range(seg.start, seg.end):
            tok = vocab.id_to_token[prompt.tokens[pos]]
            lines.append(f"{pos}\t{tok}\t{seg.kind}\t{seg.score:.6f}")
    return "\n".join(lines) + "\n"
