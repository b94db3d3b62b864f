"""Answer scoring (EM / token F1) and the three-setting evaluation harness.

Answer normalization follows the common reading-comprehension convention:
lowercase, strip punctuation, drop the articles a/an/the, collapse whitespace.
The harness evaluates a checkpoint under Normal (pristine top-k), Noisy
(partially corrupted top-k), and Extreme (fully irrelevant) document lists,
reporting mean and population stdev across seeds for the sampled settings.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import Document, QAInstance, Vocabulary, detokenize
from .indicators import compute_bundle, doc_quality_scores
from .model import ModelConfig, Params, generate
from .prompting import SCORE_FLOOR, build_prompt, expand_scores
from .retrieval import Retriever, ScoredList
from .robustness import (
    TAG_RELEVANT,
    NoisyListSpec,
    TaggedDoc,
    build_extreme_list,
    build_noisy_list,
)
from .util import canonical_json, sha256_text

SETTINGS = ("normal", "noisy", "extreme")

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, golds: Sequence[str] | frozenset[str]) -> int:
    """1 iff the normalized prediction equals any normalized gold answer."""
    if not golds:
        raise ValueError("gold answer set must be non-empty")
    norm = normalize_answer(prediction)
    return int(any(norm == normalize_answer(g) for g in golds))


def _f1_single(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    n_same = sum(common.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(pred_tokens)
    recall = n_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds: Sequence[str] | frozenset[str]) -> float:
    """Max over golds of the bag-of-tokens F1 against the prediction."""
    if not golds:
        raise ValueError("gold answer set must be non-empty")
    return max(_f1_single(prediction, g) for g in golds)


def best_gold(prediction: str, golds: Sequence[str] | frozenset[str]) -> tuple[float, str]:
    """(f1, best-matching gold); ties resolve to the lexicographically first."""
    if not golds:
        raise ValueError("gold answer set must be non-empty")
    ordered = sorted(golds)
    scores = [_f1_single(prediction, g) for g in ordered]
    idx = int(np.argmax(scores))
    return scores[idx], ordered[idx]


# --- evaluation harness -----------------------------------------------------

@dataclass(frozen=True)
class EvalContext:
    """Everything one evaluation run needs besides the checkpoint."""

    corpus: Mapping[str, Document]
    vocab: Vocabulary
    queries: tuple[QAInstance, ...]
    rankings: Mapping[str, ScoredList]
    retriever: Retriever
    instruction: str
    k: int
    scheme: str = "max"
    aggregation: str = "all"
    weight: float = 0.5
    raw_denominator: bool = False
    modulation: str = "multiplicative"
    noisy_spec: NoisyListSpec = NoisyListSpec()
    ranker_seed: int = 0
    ranker_noise: float = 0.1
    max_new_tokens: int = 8
    workers: int = 1


@dataclass(frozen=True)
class EvalRecord:
    qa_id: str
    prediction: str
    best_gold: str
    f1: float
    em: int


@dataclass
class EvalReport:
    setting: str
    seed: int | None
    records: list[EvalRecord]
    f1: float  # mean per-query F1 x 100
    em: float  # mean per-query EM x 100
    fingerprint: str


@dataclass
class EvalSummary:
    setting: str
    seeds: tuple[int, ...]
    reports: list[EvalReport]
    f1_mean: float
    f1_std: float
    em_mean: float
    em_std: float
    fingerprint: str


def presented_list(
    ctx: EvalContext, qa: QAInstance, setting: str, seed: int
) -> list[TaggedDoc]:
    """The document list a query sees under one evaluation setting."""
    ranking = ctx.rankings[qa.qa_id]
    if len(ranking.entries) < ctx.k:
        raise ValueError(
            f"ranking for {qa.qa_id} has {len(ranking.entries)} entries, need {ctx.k}"
        )
    ranking = ranking.head(ctx.k)

    def score_fn(doc_id: str) -> float:
        return ctx.retriever.score_doc(qa, doc_id)

    if setting == "normal":
        return [
            TaggedDoc(ctx.corpus[e.doc_id], TAG_RELEVANT, e.score)
            for e in ranking.entries
        ]
    if setting == "noisy":
        spec = replace(ctx.noisy_spec, seed=seed)
        if spec.total != ctx.k:
            raise ValueError(
                f"noisy composition totals {spec.total} but k={ctx.k}"
            )
        return build_noisy_list(ranking, ctx.corpus, spec, score_fn)
    if setting == "extreme":
        return build_extreme_list(ranking, ctx.corpus, ctx.k, seed, score_fn)
    raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")


def modulation_scores(ctx: EvalContext, qa: QAInstance, docs: list[TaggedDoc]):
    """Per-document modulation scores, or None when modulation is off."""
    if ctx.modulation == "off":
        return None
    bundle = compute_bundle(
        qa,
        [td.doc for td in docs],
        [td.score for td in docs],
        ctx.ranker_seed,
        ctx.ranker_noise,
    )
    values = doc_quality_scores(
        bundle, ctx.aggregation, ctx.scheme, ctx.weight, ctx.raw_denominator
    )
    return np.clip(values, SCORE_FLOOR, 1.0)


def _evaluate_query(
    params: Params,
    mcfg: ModelConfig,
    ctx: EvalContext,
    qa: QAInstance,
    setting: str,
    seed: int,
) -> EvalRecord:
    docs = presented_list(ctx, qa, setting, seed)
    doc_scores = modulation_scores(ctx, qa, docs)
    prompt = build_prompt(
        ctx.instruction,
        [td.doc for td in docs],
        qa,
        ctx.vocab,
        doc_scores=doc_scores,
        max_context=mcfg.max_context,
    )
    if doc_scores is None:
        generated = generate(params, mcfg, prompt, None, ctx.max_new_tokens)
    else:
        matrix = expand_scores(prompt)
        generated = generate(
            params, mcfg, prompt, matrix, ctx.max_new_tokens,
            modulation=ctx.modulation,
        )
    prediction = detokenize(generated, ctx.vocab)
    f1, gold = best_gold(prediction, qa.gold_answers)
    em = exact_match(prediction, qa.gold_answers)
    return EvalRecord(qa.qa_id, prediction, gold, f1, em)


def _fingerprint(ctx: EvalContext, params_id: str, setting: str, seeds) -> str:
    payload = {
        "setting": setting,
        "seeds": list(seeds),
        "k": ctx.k,
        "scheme": ctx.scheme,
        "aggregation": ctx.aggregation,
        "weight": ctx.weight,
        "raw_denominator": ctx.raw_denominator,
        "modulation": ctx.modulation,
        "noisy": [ctx.noisy_spec.n_relevant, ctx.noisy_spec.n_partial,
                  ctx.noisy_spec.n_irrelevant, ctx.noisy_spec.order],
        "ranker_seed": ctx.ranker_seed,
        "ranker_noise": ctx.ranker_noise,
        "checkpoint": params_id,
        "vocab_size": ctx.vocab.size,
    }
    return sha256_text(canonical_json(payload))


def run_eval(
    params: Params,
    mcfg: ModelConfig,
    ctx: EvalContext,
    setting: str,
    seeds: Sequence[int] = (0,),
    params_id: str = "",
) -> EvalSummary:
    """Evaluate every query under one setting, across seeds where sampled.

    The Normal setting is deterministic and runs once; Noisy and Extreme run
    once per seed and the summary reports mean and population stdev. Missing
    rankings raise before any generation starts.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    if mcfg.vocab_size != ctx.vocab.size:
        raise ValueError(
            f"checkpoint vocab size {mcfg.vocab_size} does not match "
            f"corpus vocabulary size {ctx.vocab.size}"
        )
    missing = [qa.qa_id for qa in ctx.queries if qa.qa_id not in ctx.rankings]
    if missing:
        raise ValueError(f"missing retrieval results for: {', '.join(missing[:5])}")

    run_seeds = [None] if setting == "normal" else list(seeds)
    fingerprint = _fingerprint(ctx, params_id, setting, [s for s in run_seeds if s is not None])
    reports = []
    for seed in run_seeds:
        eff_seed = 0 if seed is None else seed

        def job(qa: QAInstance) -> EvalRecord:
            return _evaluate_query(params, mcfg, ctx, qa, setting, eff_seed)

        if ctx.workers > 1:
            with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
                records = list(pool.map(job, ctx.queries))
        else:
            records = [job(qa) for qa in ctx.queries]
        f1 = 100.0 * float(np.mean([r.f1 for r in records]))
        em = 100.0 * float(np.mean([r.em for r in records]))
        reports.append(EvalReport(setting, seed, records, f1, em, fingerprint))

    f1s = np.array([r.f1 for r in reports])
    ems = np.array([r.em for r in reports])
    return EvalSummary(
        setting=setting,
        seeds=tuple(s for s in run_seeds if s is not None),
        reports=reports,
        f1_mean=float(f1s.mean()),
        f1_std=float(f1s.std()),
        em_mean=float(ems.mean()),
        em_std=float(ems.std()),
        fingerprint=fingerprint,
    )


def topk_sweep(
    params: Params,
    mcfg: ModelConfig,
    ctx: EvalContext,
    ks: Sequence[int],
    params_id: str = "",
) -> list[tuple[int, float, float]]:
    """Normal-setting evaluation per k; rows of (k, F1, EM)."""
    rows = []
    for k in ks:
        summary = run_eval(params, mcfg, replace(ctx, k=k), "normal", params_id=params_id)
        rows.append((k, summary.f1_mean, summary.em_mean))
    return rows


# --- report files -----------------------------------------------------------

def summary_to_dict(summary: EvalSummary) -> dict:
    return {
        "setting": summary.setting,
        "seeds": list(summary.seeds),
        "f1_mean": summary.f1_mean,
        "f1_std": summary.f1_std,
        "em_mean": summary.em_mean,
        "em_std": summary.em_std,
        "fingerprint": summary.fingerprint,
        "runs": [
            {
                "seed": rep.seed,
                "f1": rep.f1,
                "em": rep.em,
                "records": [
                    {
                        "qa_id": r.qa_id,
                        "prediction": r.prediction,
                        "best_gold": r.best_gold,
                        "f1": r.f1,
                        "em": r.em,
                    }
                    for r in rep.records
                ],
            }
            for rep in summary.reports
        ],
    }


def write_report(path: str | Path, summary: EvalSummary) -> None:
    Path(path).write_text(canonical_json(summary_to_dict(summary)) + "\n", encoding="utf-8")


def write_records_csv(path: str | Path, summary: EvalSummary) -> None:
    lines = ["seed,qa_id,prediction,best_gold,f1,em"]
    for rep in summary.reports:
        seed = "" if rep.seed is None else rep.seed
        for r in rep.records:
            lines.append(f"{seed},{r.qa_id},{r.prediction},{r.best_gold},{r.f1:.6f},{r.em}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_sweep_csv(path: str | Path, rows: Sequence[tuple[int, float, float]]) -> None:
    lines = ["k,f1,em"]
    for k, f1, em in rows:
        lines.append(f"{k},{f1:.6f},{em:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
