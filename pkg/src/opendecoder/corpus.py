"""Synthetic fact corpus, QA instances, and the shared word-level tokenizer.

The corpus is a deterministic function of its parameters: one fact document
per (entity, relation) pair stating a subject-relation-object triple, one QA
instance per triple asking for the object, plus answer-free distractor
documents. Every generated content word is exactly three consonant-vowel
syllables long and globally unique within its pool, which rules out answer
strings leaking into distractors even at the substring level.
"""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .util import read_jsonl, rng_for, write_jsonl

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")
PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

# Scaffold words shared by facts, distractors, and questions.
_FACT_TEMPLATE = "the {rel} of {ent} is {obj}"
_QUESTION_TEMPLATE = "what is the {rel} of {ent}"
_TEMPLATE_WORDS = ("the", "of", "is", "what")


def canonical_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


class UnknownTokenError(KeyError):
    """A word outside the corpus-closed vocabulary was tokenized."""


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token <-> index map with the four special tokens at 0..3."""

    id_to_token: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.id_to_token[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ValueError("special tokens must occupy the lowest indices")
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("duplicate token in vocabulary")

    @property
    def token_to_id(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.id_to_token)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    pad_id = PAD_ID
    bos_id = BOS_ID
    eos_id = EOS_ID
    sep_id = SEP_ID

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        content = sorted(set(words) - set(SPECIAL_TOKENS))
        return cls(SPECIAL_TOKENS + tuple(content))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


def tokenize(text: str, vocab: Vocabulary, allow_unknown: bool = False) -> list[int]:
    """Map text to vocabulary indices (lowercased, punctuation-stripped).

    Unknown words raise :class:`UnknownTokenError` naming the word. With
    ``allow_unknown=True`` (the out-of-vocabulary query policy) unknown words
    are dropped instead; there is no UNK index in the vocabulary.
    """
    mapping = vocab.token_to_id
    ids = []
    for word in canonical_text(text).split():
        idx = mapping.get(word)
        if idx is None:
            if allow_unknown:
                continue
            raise UnknownTokenError(f"token not in vocabulary: {word!r}")
        ids.append(idx)
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Inverse of :func:`tokenize` on canonical text; special tokens are skipped."""
    n_special = len(SPECIAL_TOKENS)
    return " ".join(vocab.id_to_token[i] for i in ids if i >= n_special)


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str
    tokens: tuple[int, ...]


@dataclass(frozen=True)
class QAInstance:
    qa_id: str
    question: str
    gold_answers: frozenset[str]
    gold_doc_ids: frozenset[str]


def _make_word(rng: np.random.Generator, used: set[str], reserved: set[str]) -> str:
    """A fresh three-syllable pseudo-word, unique across every pool."""
    consonants = list(_CONSONANTS)
    vowels = list(_VOWELS)
    while True:
        word = "".join(
            rng.choice(consonants) + rng.choice(vowels) for _ in range(3)
        )
        if word not in used and word not in reserved:
            used.add(word)
            return word


def generate_corpus(
    seed: int,
    n_entities: int,
    n_relations: int,
    n_distractors: int,
    extra_vocab_texts: Sequence[str] = (),
) -> tuple[list[Document], list[QAInstance], Vocabulary]:
    """Build the synthetic corpus. Identical inputs give byte-identical outputs.

    ``extra_vocab_texts`` lets callers close the vocabulary over prompt
    instruction wording without coupling this module to prompting.
    """
    if n_entities < 2:
        raise ValueError(f"n_entities must be >= 2, got {n_entities}")
    if n_relations < 1:
        raise ValueError(f"n_relations must be >= 1, got {n_relations}")
    if n_distractors < 0:
        raise ValueError(f"n_distractors must be >= 0, got {n_distractors}")

    rng = rng_for("corpus", seed, n_entities, n_relations, n_distractors)
    reserved = set(_TEMPLATE_WORDS)
    for text in extra_vocab_texts:
        reserved.update(canonical_text(text).split())

    used: set[str] = set()
    entities = [_make_word(rng, used, reserved) for _ in range(n_entities)]
    relations = [_make_word(rng, used, reserved) for _ in range(n_relations)]

    documents: list[Document] = []
    qas: list[QAInstance] = []
    fact_idx = 0
    answer_lengths = [1, 2, 3]
    answer_weights = [0.6, 0.25, 0.15]
    for ent in entities:
        for rel in relations:
            n_obj = int(rng.choice(answer_lengths, p=answer_weights))
            obj = " ".join(_make_word(rng, used, reserved) for _ in range(n_obj))
            doc_id = f"fact-{fact_idx:05d}"
            text = _FACT_TEMPLATE.format(rel=rel, ent=ent, obj=obj)
            documents.append(Document(doc_id, text, ()))
            qas.append(
                QAInstance(
                    qa_id=f"qa-{fact_idx:05d}",
                    question=_QUESTION_TEMPLATE.format(rel=rel, ent=ent),
                    gold_answers=frozenset({obj}),
                    gold_doc_ids=frozenset({doc_id}),
                )
            )
            fact_idx += 1

    # Distractors reuse a bounded filler pool; filler words are disjoint from
    # entity/relation/object words, so no gold answer can occur in them.
    n_fillers = max(30, 6 * int(np.ceil(np.sqrt(max(n_distractors, 1)))))
    fillers = [_make_word(rng, used, reserved) for _ in range(n_fillers)]
    seen_texts = {d.text for d in documents}
    for i in range(n_distractors):
        while True:
            a, b, c = rng.choice(len(fillers), size=3, replace=False)
            text = _FACT_TEMPLATE.format(rel=fillers[a], ent=fillers[b], obj=fillers[c])
            if text not in seen_texts:
                seen_texts.add(text)
                break
        documents.append(Document(f"dist-{i:05d}", text, ()))

    words: set[str] = set(reserved)
    for doc in documents:
        words.update(canonical_text(doc.text).split())
    for qa in qas:
        words.update(canonical_text(qa.question).split())
    vocab = Vocabulary.from_words(words)

    documents = [
        Document(d.doc_id, d.text, tuple(tokenize(d.text, vocab))) for d in documents
    ]
    return documents, qas, vocab


# --- artifact files -------------------------------------------------------

def write_documents(path: str | Path, documents: Sequence[Document]) -> None:
    write_jsonl(path, ({"doc_id": d.doc_id, "text": d.text} for d in documents))


def read_documents(path: str | Path, vocab: Vocabulary) -> list[Document]:
    return [
        Document(row["doc_id"], row["text"], tuple(tokenize(row["text"], vocab)))
        for row in read_jsonl(path)
    ]


def write_qas(path: str | Path, qas: Sequence[QAInstance]) -> None:
    write_jsonl(
        path,
        (
            {
                "qa_id": qa.qa_id,
                "question": qa.question,
                "answers": sorted(qa.gold_answers),
                "gold_doc_ids": sorted(qa.gold_doc_ids),
            }
            for qa in qas
        ),
    )


def read_qas(path: str | Path) -> list[QAInstance]:
    return [
        QAInstance(
            row["qa_id"],
            row["question"],
            frozenset(row["answers"]),
            frozenset(row["gold_doc_ids"]),
        )
        for row in read_jsonl(path)
    ]


def corpus_by_id(documents: Iterable[Document]) -> Mapping[str, Document]:
    out = {}
    for doc in documents:
        if doc.doc_id in out:
            raise ValueError(f"duplicate doc_id: {doc.doc_id}")
        out[doc.doc_id] = doc
    return out
