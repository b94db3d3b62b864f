"""Walk through the data side of the pipeline: synthetic corpus, toy
retrieval, and the three per-document quality signals.

Run:  python3 demos/01_corpus_retrieval_indicators.py
"""

import numpy as np

from opendecoder import generate_corpus
from opendecoder.indicators import compute_bundle, doc_quality_scores, normalize
from opendecoder.prompting import COMPACT_INSTRUCTION
from opendecoder.retrieval import Retriever

# A corpus is a deterministic function of its parameters: one fact document
# per (entity, relation) pair, one QA instance per fact, plus distractors
# that provably contain no gold answer.
docs, qas, vocab = generate_corpus(
    seed=7, n_entities=12, n_relations=2, n_distractors=60,
    extra_vocab_texts=(COMPACT_INSTRUCTION,),
)
print(f"{len(docs)} documents, {len(qas)} QA instances, vocab size {vocab.size}")
qa = qas[0]
print(f"\nquestion: {qa.question!r}")
print(f"answers:  {sorted(qa.gold_answers)}")

# Bag-of-tokens cosine retrieval. Fact documents share scaffold and content
# words with their question, so the gold document ranks high.
retriever = Retriever(docs, vocab)
ranking = retriever.retrieve(qa, k=6)
print("\ntop-6 retrieval:")
for entry in ranking.entries:
    marker = " <- gold" if entry.doc_id in qa.gold_doc_ids else ""
    print(f"  rank {entry.rank}  {entry.doc_id}  cos={entry.score:+.3f}{marker}")

# Three signals per document: retriever cosine, a ranker-style overlap
# logit, and a query-difficulty (QPP) logit from the score distribution.
by_id = {d.doc_id: d for d in docs}
listed = [by_id[e.doc_id] for e in ranking.entries]
bundle = compute_bundle(qa, listed, [e.score for e in ranking.entries], seed=0)
print("\nindicator signals (ret / rank logit / qpp logit):")
for doc_id, ret, rank, qpp in zip(bundle.doc_ids, bundle.ret, bundle.rank_score, bundle.qpp):
    print(f"  {doc_id}: {ret:+.3f} / {rank:+.3f} / {qpp:+.3f}")

# Normalization schemes from the score-shaping study.
print("\nnormalize([2, 4, 8]):")
for scheme in ("max", "minmax", "exprank"):
    print(f"  {scheme:8s} -> {[round(v, 5) for v in normalize([2, 4, 8], scheme).values]}")

# The aggregate used for attention modulation: max = 1, everything else
# scaled relative to the best document.
scores = doc_quality_scores(bundle, aggregation="all", scheme="max")
print("\naggregated modulation scores:", np.round(scores, 3))
