import os

# Single-threaded BLAS: faster for this model scale and keeps summation
# order fixed. Must be set before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from opendecoder.corpus import generate_corpus
from opendecoder.prompting import COMPACT_INSTRUCTION
from opendecoder.retrieval import Retriever


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small shared corpus: 10 entities x 3 relations + 50 distractors."""
    docs, qas, vocab = generate_corpus(
        7, 10, 3, 50, extra_vocab_texts=(COMPACT_INSTRUCTION,)
    )
    return docs, qas, vocab


@pytest.fixture(scope="session")
def tiny_retriever(tiny_corpus):
    docs, _, vocab = tiny_corpus
    return Retriever(docs, vocab)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
