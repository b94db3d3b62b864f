"""Pipeline stages: corpus, retrieve, indicators, train, eval, sweep, ablate.

Each stage reads the artifacts of its upstream stages from the output
directory, writes its own artifacts plus a manifest (input hashes, config
fingerprint, seed, output hashes), and is byte-reproducible: re-running a
stage with unchanged inputs rewrites identical files.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import corpus as corpus_mod
from . import model as model_mod
from .config import RunConfig
from .corpus import Document, QAInstance, Vocabulary, corpus_by_id, tokenize
from .evaluation import (
    SETTINGS,
    EvalContext,
    EvalSummary,
    run_eval,
    topk_sweep,
    write_records_csv,
    write_report,
    write_sweep_csv,
)
from .indicators import compute_bundle, doc_quality_scores, write_indicators
from .model import ModelConfig, Params, params_checksum
from .prompting import SCORE_FLOOR, build_prompt, expand_scores
from .retrieval import Retriever, ScoredList, rankings_by_id, read_rankings, write_rankings
from .robustness import (
    TAG_RELEVANT,
    NoisyListSpec,
    TaggedDoc,
    apply_order,
    build_extreme_list,
    build_noisy_list,
)
from .training import TrainConfig, TrainExample, make_example, train
from .util import canonical_json, rng_for, sha256_file, stable_seed

log = logging.getLogger("opendecoder")

STAGES = ("corpus", "retrieve", "indicators", "train", "eval", "sweep", "ablate")

# Stage whose artifacts must exist before another stage can run.
_UPSTREAM = {
    "retrieve": "corpus",
    "indicators": "retrieve",
    "train": "retrieve",
    "eval": "train",
    "sweep": "train",
    "ablate": "retrieve",
}

_ARTIFACTS = {
    "corpus": ("corpus.jsonl", "qa.jsonl", "vocab.txt"),
    "retrieve": ("rankings.jsonl",),
    "indicators": ("indicators.jsonl",),
    "train": ("checkpoint.npz", "train_log.csv"),
    "eval": tuple(
        name
        for setting in SETTINGS
        for name in (f"eval_{setting}.json", f"eval_{setting}_records.csv")
    ),
    "sweep": ("sweep.csv",),
    "ablate": ("ablate.csv", "order_study.csv"),
}


class MissingArtifactError(RuntimeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"missing artifact {missing!r}; run stage {stage!r} first")
        self.stage = stage
        self.missing = missing


def _require(out: Path, stage: str) -> None:
    for name in _ARTIFACTS[stage]:
        if not (out / name).exists():
            raise MissingArtifactError(stage, name)


def _write_manifest(
    out: Path, stage: str, cfg: RunConfig, inputs: Sequence[str], outputs: Sequence[str]
) -> None:
    manifest = {
        "stage": stage,
        "config_fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "inputs": {name: sha256_file(out / name) for name in sorted(inputs)},
        "outputs": {name: sha256_file(out / name) for name in sorted(outputs)},
    }
    path = out / f"manifest_{stage}.json"
    path.write_text(canonical_json(manifest) + "\n", encoding="utf-8")


def manifest_paths(out: Path) -> list[Path]:
    return sorted(out.glob("manifest_*.json"))


# --- shared loading ---------------------------------------------------------

@dataclass
class LoadedData:
    documents: list[Document]
    corpus: Mapping[str, Document]
    qas: list[QAInstance]
    vocab: Vocabulary
    rankings: Mapping[str, ScoredList] | None = None
    retriever: Retriever | None = None


def _load_corpus(cfg: RunConfig, out: Path) -> LoadedData:
    _require(out, "corpus")
    vocab = Vocabulary.load(out / "vocab.txt")
    documents = corpus_mod.read_documents(out / "corpus.jsonl", vocab)
    qas = corpus_mod.read_qas(out / "qa.jsonl")
    return LoadedData(documents, corpus_by_id(documents), qas, vocab)


def _load_through_retrieve(cfg: RunConfig, out: Path) -> LoadedData:
    data = _load_corpus(cfg, out)
    _require(out, "retrieve")
    data.rankings = rankings_by_id(read_rankings(out / "rankings.jsonl"))
    data.retriever = Retriever(data.documents, data.vocab, cfg.retrieval.dim)
    return data


# --- stages -----------------------------------------------------------------

def stage_corpus(cfg: RunConfig, out: Path) -> None:
    docs, qas, vocab = corpus_mod.generate_corpus(
        cfg.corpus.seed,
        cfg.corpus.n_entities,
        cfg.corpus.n_relations,
        cfg.corpus.n_distractors,
        extra_vocab_texts=(cfg.instruction,),
    )
    corpus_mod.write_documents(out / "corpus.jsonl", docs)
    corpus_mod.write_qas(out / "qa.jsonl", qas)
    vocab.save(out / "vocab.txt")
    _write_manifest(out, "corpus", cfg, (), _ARTIFACTS["corpus"])
    log.info("corpus: %d documents, %d QA instances, vocab %d", len(docs), len(qas), vocab.size)


def stage_retrieve(cfg: RunConfig, out: Path) -> None:
    data = _load_corpus(cfg, out)
    retriever = Retriever(data.documents, data.vocab, cfg.retrieval.dim)
    rankings = [retriever.retrieve(qa, cfg.retrieval.k) for qa in data.qas]
    write_rankings(out / "rankings.jsonl", rankings)
    _write_manifest(out, "retrieve", cfg, _ARTIFACTS["corpus"], _ARTIFACTS["retrieve"])
    log.info("retrieve: ranked %d queries at k=%d", len(rankings), cfg.retrieval.k)


def stage_indicators(cfg: RunConfig, out: Path) -> None:
    data = _load_through_retrieve(cfg, out)
    bundles = []
    for qa in data.qas:
        ranking = data.rankings[qa.qa_id]
        docs = [data.corpus[e.doc_id] for e in ranking.entries]
        scores = [e.score for e in ranking.entries]
        bundles.append(
            compute_bundle(qa, docs, scores, cfg.indicators.ranker_seed,
                           cfg.indicators.ranker_noise)
        )
    write_indicators(out / "indicators.jsonl", bundles)
    _write_manifest(
        out, "indicators", cfg,
        _ARTIFACTS["corpus"] + _ARTIFACTS["retrieve"], _ARTIFACTS["indicators"],
    )
    log.info("indicators: wrote %d bundles", len(bundles))


def _presented_training_list(
    cfg: RunConfig,
    data: LoadedData,
    qa: QAInstance,
    sample_key: int,
    robust: bool,
    order: str,
) -> list[TaggedDoc]:
    """One training document list for a given sampling period."""
    ranking = data.rankings[qa.qa_id].head(cfg.retrieval.k)

    def score_fn(doc_id: str) -> float:
        return data.retriever.score_doc(qa, doc_id)

    if robust:
        roll = rng_for("train-failure", cfg.training.seed, sample_key, qa.qa_id).random()
        if roll < cfg.training.failure_fraction:
            # Retrieval-failure example: the whole list is irrelevant, so the
            # answer must come from parametric memory.
            return build_extreme_list(
                ranking, data.corpus, cfg.retrieval.k,
                stable_seed("train-extreme", cfg.training.seed, sample_key), score_fn,
            )
        spec = NoisyListSpec(
            cfg.noisy.n_relevant, cfg.noisy.n_partial, cfg.noisy.n_irrelevant,
            cfg.noisy.order, stable_seed("train-noisy", cfg.training.seed, sample_key),
        )
        return build_noisy_list(ranking, data.corpus, spec, score_fn)

    docs = [TaggedDoc(data.corpus[e.doc_id], TAG_RELEVANT, e.score) for e in ranking.entries]
    return apply_order(
        docs, order, rng_for("train-order", cfg.training.seed, sample_key, qa.qa_id)
    )


def _training_example(
    cfg: RunConfig,
    data: LoadedData,
    qa: QAInstance,
    docs: list[TaggedDoc],
    modulation: str,
    aggregation: str,
    sample_key: int,
) -> TrainExample:
    doc_scores = None
    if modulation != "off":
        bundle = compute_bundle(
            qa, [td.doc for td in docs], [td.score for td in docs],
            cfg.indicators.ranker_seed, cfg.indicators.ranker_noise,
        )
        values = doc_quality_scores(
            bundle, aggregation, cfg.indicators.scheme,
            cfg.indicators.weight, cfg.indicators.raw_denominator,
        )
        doc_scores = np.clip(values, SCORE_FLOOR, 1.0)
    answer = sorted(qa.gold_answers)[0]
    prompt = build_prompt(
        cfg.instruction, [td.doc for td in docs], qa, data.vocab,
        answer_tokens=tokenize(answer, data.vocab),
        doc_scores=doc_scores,
        max_context=cfg.training.max_context,
    )
    scores = expand_scores(prompt).token_scores if doc_scores is not None else None
    return make_example(f"{qa.qa_id}@s{sample_key}", prompt, scores)


def make_training_provider(
    cfg: RunConfig,
    data: LoadedData,
    modulation: str | None = None,
    robust: bool | None = None,
    aggregation: str | None = None,
    order: str | None = None,
):
    """Per-epoch training dataset builder honoring the given overrides."""
    modulation = cfg.modulation if modulation is None else modulation
    robust = cfg.training.robust if robust is None else robust
    aggregation = cfg.indicators.aggregation if aggregation is None else aggregation
    order = cfg.training.order if order is None else order
    every = cfg.training.resample_every
    cache: dict[int, list[TrainExample]] = {}

    def provider(epoch: int) -> list[TrainExample]:
        # sample_key 0 reproduces the sampled-once-and-fixed protocol;
        # resample_every > 0 redraws the lists every that-many epochs
        sample_key = 0 if every == 0 else epoch // every
        if sample_key in cache:
            return cache[sample_key]
        examples = []
        for qa in data.qas:
            docs = _presented_training_list(cfg, data, qa, sample_key, robust, order)
            examples.append(
                _training_example(cfg, data, qa, docs, modulation, aggregation, sample_key)
            )
        cache.clear()
        cache[sample_key] = examples
        return examples

    return provider


def model_config(cfg: RunConfig, vocab: Vocabulary) -> ModelConfig:
    t = cfg.training
    return ModelConfig(
        vocab_size=vocab.size, d_model=t.d_model, n_heads=t.n_heads,
        n_layers=t.n_layers, d_ff=t.d_ff, max_context=t.max_context, seed=t.seed,
    )


def train_config(cfg: RunConfig, modulation: str | None = None, epochs: int | None = None) -> TrainConfig:
    t = cfg.training
    modulation = cfg.modulation if modulation is None else modulation
    return TrainConfig(
        epochs=t.epochs if epochs is None else epochs,
        batch_size=t.batch_size, lr=t.lr, warmup_steps=t.warmup_steps,
        clip_norm=t.clip_norm, seed=t.seed,
        heldout_fraction=t.heldout_fraction,
        modulation="multiplicative" if modulation == "off" else modulation,
        freeze_non_attention=t.freeze_non_attention,
    )


def train_model(
    cfg: RunConfig,
    data: LoadedData,
    modulation: str | None = None,
    robust: bool | None = None,
    aggregation: str | None = None,
    order: str | None = None,
    epochs: int | None = None,
    log_path: Path | None = None,
) -> tuple[Params, ModelConfig, int]:
    mcfg = model_config(cfg, data.vocab)
    provider = make_training_provider(cfg, data, modulation, robust, aggregation, order)
    params = model_mod.init_params(mcfg)
    if cfg.training.precision != "float64":
        params = model_mod.cast_params(params, cfg.training.precision)
    result = train(
        params, mcfg, provider,
        train_config(cfg, modulation, epochs), log_path=log_path,
    )
    for stats in result.epoch_stats:
        log.debug(
            "epoch %d: train loss %.4f heldout %s",
            stats.epoch, stats.train_loss,
            "n/a" if stats.heldout_loss is None else f"{stats.heldout_loss:.4f}",
        )
    return result.params, mcfg, result.steps


def stage_train(cfg: RunConfig, out: Path) -> None:
    data = _load_through_retrieve(cfg, out)
    params, mcfg, steps = train_model(cfg, data, log_path=out / "train_log.csv")
    model_mod.save_checkpoint(out / "checkpoint.npz", params, mcfg, cfg.training.seed, steps)
    _write_manifest(
        out, "train", cfg,
        _ARTIFACTS["corpus"] + _ARTIFACTS["retrieve"], _ARTIFACTS["train"],
    )
    log.info("train: %d steps, checkpoint %s", steps, params_checksum(params)[:12])


def eval_context(cfg: RunConfig, data: LoadedData, modulation: str | None = None,
                 aggregation: str | None = None, k: int | None = None) -> EvalContext:
    return EvalContext(
        corpus=data.corpus,
        vocab=data.vocab,
        queries=tuple(data.qas),
        rankings=data.rankings,
        retriever=data.retriever,
        instruction=cfg.instruction,
        k=cfg.retrieval.k if k is None else k,
        scheme=cfg.indicators.scheme,
        aggregation=cfg.indicators.aggregation if aggregation is None else aggregation,
        weight=cfg.indicators.weight,
        raw_denominator=cfg.indicators.raw_denominator,
        modulation=cfg.modulation if modulation is None else modulation,
        noisy_spec=NoisyListSpec(
            cfg.noisy.n_relevant, cfg.noisy.n_partial, cfg.noisy.n_irrelevant,
            cfg.noisy.order, 0,
        ),
        ranker_seed=cfg.indicators.ranker_seed,
        ranker_noise=cfg.indicators.ranker_noise,
        max_new_tokens=cfg.eval.max_new_tokens,
        workers=cfg.workers,
    )


def stage_eval(cfg: RunConfig, out: Path) -> dict[str, EvalSummary]:
    data = _load_through_retrieve(cfg, out)
    _require(out, "train")
    params, mcfg, meta = model_mod.load_checkpoint(out / "checkpoint.npz")
    ctx = eval_context(cfg, data)
    params_id = params_checksum(params)
    summaries = {}
    for setting in SETTINGS:
        summary = run_eval(params, mcfg, ctx, setting, cfg.eval.seeds, params_id)
        write_report(out / f"eval_{setting}.json", summary)
        write_records_csv(out / f"eval_{setting}_records.csv", summary)
        summaries[setting] = summary
        log.info(
            "eval %s: F1 %.2f +/- %.2f, EM %.2f +/- %.2f",
            setting, summary.f1_mean, summary.f1_std, summary.em_mean, summary.em_std,
        )
    _write_manifest(
        out, "eval", cfg,
        _ARTIFACTS["corpus"] + _ARTIFACTS["retrieve"] + _ARTIFACTS["train"],
        _ARTIFACTS["eval"],
    )
    return summaries


def stage_sweep(cfg: RunConfig, out: Path) -> None:
    data = _load_through_retrieve(cfg, out)
    _require(out, "train")
    params, mcfg, _ = model_mod.load_checkpoint(out / "checkpoint.npz")
    max_k = max(cfg.sweep.ks)
    if max_k > len(data.documents):
        raise ValueError(f"sweep k={max_k} exceeds corpus size {len(data.documents)}")
    rankings = data.rankings
    if any(len(r.entries) < max_k for r in rankings.values()):
        rankings = rankings_by_id(
            [data.retriever.retrieve(qa, max_k) for qa in data.qas]
        )
    ctx = dataclasses.replace(eval_context(cfg, data), rankings=rankings)
    rows = topk_sweep(params, mcfg, ctx, cfg.sweep.ks, params_checksum(params))
    write_sweep_csv(out / "sweep.csv", rows)
    _write_manifest(
        out, "sweep", cfg,
        _ARTIFACTS["corpus"] + _ARTIFACTS["retrieve"] + _ARTIFACTS["train"],
        _ARTIFACTS["sweep"],
    )
    log.info("sweep: %s", rows)


ORDER_REGIMES = ("original", "reverse", "shuffle", "noise")


def stage_ablate(cfg: RunConfig, out: Path) -> None:
    """Train and evaluate the ablation grid plus the document-order study.

    The grid always contains the uniform-score control cell (modulation off)
    so every comparison is anchored.
    """
    data = _load_through_retrieve(cfg, out)
    epochs = cfg.ablate.epochs

    modulations = list(cfg.ablate.modulations)
    if "off" not in modulations:
        modulations.append("off")

    grid_rows = []
    for mod in modulations:
        for robust in cfg.ablate.robust:
            for agg in cfg.ablate.aggregations:
                cell = f"mod={mod}|robust={str(robust).lower()}|agg={agg}"
                log.info("ablate cell: %s", cell)
                params, mcfg, _ = train_model(
                    cfg, data, modulation=mod, robust=robust,
                    aggregation=agg, epochs=epochs,
                )
                ctx = eval_context(cfg, data, modulation=mod, aggregation=agg)
                for setting in SETTINGS:
                    summary = run_eval(
                        params, mcfg, ctx, setting, cfg.eval.seeds,
                        params_checksum(params),
                    )
                    grid_rows.append((cell, setting, summary.f1_mean, summary.em_mean))

    lines = ["cell,setting,f1,em"]
    for cell, setting, f1, em in grid_rows:
        lines.append(f"{cell},{setting},{f1:.6f},{em:.6f}")
    (out / "ablate.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    # Document-order study: three uncorrupted order regimes plus the noisy
    # composition, all trained with the configured modulation and scored in
    # the noisy evaluation setting.
    order_rows = []
    for regime in ORDER_REGIMES:
        robust = regime == "noise"
        order = cfg.training.order if robust else regime
        log.info("order regime: %s", regime)
        params, mcfg, _ = train_model(
            cfg, data, robust=robust, order=order, epochs=epochs,
        )
        ctx = eval_context(cfg, data)
        summary = run_eval(params, mcfg, ctx, "noisy", cfg.eval.seeds,
                           params_checksum(params))
        order_rows.append((regime, "noisy", summary.f1_mean, summary.em_mean))

    lines = ["order,setting,f1,em"]
    for regime, setting, f1, em in order_rows:
        lines.append(f"{regime},{setting},{f1:.6f},{em:.6f}")
    (out / "order_study.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    ranked = sorted(order_rows, key=lambda r: -r[2])
    log.info("order study by F1: %s", " >= ".join(r[0] for r in ranked))

    _write_manifest(
        out, "ablate", cfg,
        _ARTIFACTS["corpus"] + _ARTIFACTS["retrieve"], _ARTIFACTS["ablate"],
    )


_STAGE_FNS = {
    "corpus": stage_corpus,
    "retrieve": stage_retrieve,
    "indicators": stage_indicators,
    "train": stage_train,
    "eval": stage_eval,
    "sweep": stage_sweep,
    "ablate": stage_ablate,
}


def run_stage(cfg: RunConfig, stage: str, out_dir: str | Path | None = None):
    """Run one stage (or 'all'); returns nothing useful except for eval."""
    out = Path(cfg.out_dir if out_dir is None else out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "all":
        result = None
        for name in STAGES:
            log.info("stage: %s", name)
            result = _STAGE_FNS[name](cfg, out)
        return result
    if stage not in _STAGE_FNS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES + ('all',)}")
    return _STAGE_FNS[stage](cfg, out)
