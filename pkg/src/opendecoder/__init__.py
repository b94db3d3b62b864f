"""Score-modulated attention decoding for retrieval-augmented generation.

A desk-scale, fully testable pipeline: synthetic fact corpus, deterministic
toy retrieval, per-document quality indicators that multiply the attention
logits of a tiny from-scratch transformer, robustness training on corrupted
document lists, and a three-setting noisy evaluation harness.
"""

from .config import ConfigError, RunConfig, config_from_dict, load_config
from .corpus import (
    Document,
    QAInstance,
    UnknownTokenError,
    Vocabulary,
    canonical_text,
    detokenize,
    generate_corpus,
    tokenize,
)
from .evaluation import (
    EvalContext,
    EvalReport,
    EvalSummary,
    exact_match,
    normalize_answer,
    run_eval,
    token_f1,
    topk_sweep,
)
from .indicators import (
    IndicatorBundle,
    NormalizedScores,
    aggregate,
    compute_bundle,
    doc_quality_scores,
    normalize,
    score_qpp_proxy,
    score_ranker_proxy,
)
from .model import (
    AttentionTrace,
    ModelConfig,
    forward,
    generate,
    init_params,
    load_checkpoint,
    loss,
    loss_and_grads,
    modulated_attention,
    save_checkpoint,
)
from .prompting import (
    DEFAULT_INSTRUCTION,
    ScoreMatrix,
    SegmentedPrompt,
    build_prompt,
    expand_scores,
)
from .retrieval import Retriever, ScoredList, embed, retrieve
from .robustness import (
    NoisyListSpec,
    TaggedDoc,
    build_extreme_list,
    build_noisy_list,
)
from .training import TrainConfig, TrainExample, TrainingDiverged, train

__version__ = "0.1.0"
