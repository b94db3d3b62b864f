import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opendecoder.corpus import corpus_by_id, generate_corpus, tokenize
from opendecoder.evaluation import (
    EvalContext,
    best_gold,
    exact_match,
    normalize_answer,
    presented_list,
    run_eval,
    token_f1,
    topk_sweep,
    write_records_csv,
    write_report,
    write_sweep_csv,
)
from opendecoder.model import ModelConfig, init_params
from opendecoder.prompting import COMPACT_INSTRUCTION, build_prompt, expand_scores
from opendecoder.retrieval import Retriever, rankings_by_id
from opendecoder.robustness import NoisyListSpec
from opendecoder.training import TrainConfig, make_example, train


# --- answer normalization and metrics ----------------------------------------

def test_normalize_answer():
    assert normalize_answer("The Eiffel  Tower!") == "eiffel tower"
    assert normalize_answer("A    cat") == "cat"
    assert normalize_answer("an answer, the end.") == "answer end"


@pytest.mark.parametrize(
    "prediction,golds,expected",
    [
        ("The Eiffel Tower", {"eiffel tower"}, 1),
        ("", {"paris"}, 0),
        ("paris france", {"paris"}, 0),
        ("PARIS", {"paris", "lutetia"}, 1),
    ],
)
def test_exact_match_table(prediction, golds, expected):
    assert exact_match(prediction, golds) == expected


@pytest.mark.parametrize(
    "prediction,golds,expected",
    [
        ("paris", {"paris"}, 1.0),
        ("paris france", {"paris"}, 2 / 3),  # P=0.5, R=1.0
        ("london", {"paris"}, 0.0),
        ("", {""}, 1.0),
        ("", {"paris"}, 0.0),
        ("the a an", {"x"}, 0.0),  # normalizes to empty vs non-empty
    ],
)
def test_token_f1_table(prediction, golds, expected):
    assert token_f1(prediction, golds) == pytest.approx(expected, abs=1e-12)


def test_metrics_require_golds():
    with pytest.raises(ValueError):
        exact_match("x", set())
    with pytest.raises(ValueError):
        token_f1("x", set())


def test_best_gold_deterministic_ties():
    f1, gold = best_gold("x y", {"b", "a"})
    assert gold == "a"  # lexicographic tie-break


_words = st.lists(
    st.sampled_from(["paris", "tower", "the", "cat", "a", "rain", "x1"]),
    min_size=0, max_size=4,
)


@settings(max_examples=300, deadline=None)
@given(_words, _words)
def test_em_implies_f1_one(pred_words, gold_words):
    prediction = " ".join(pred_words)
    gold = " ".join(gold_words)
    if exact_match(prediction, [gold]) == 1:
        assert token_f1(prediction, [gold]) == 1.0


def test_em_implies_f1_random_pairs(rng):
    vocab = ["paris", "tower", "cat", "dog", "rain", "sun", "a", "the"]
    for _ in range(2000):
        pred = " ".join(rng.choice(vocab, size=rng.integers(0, 4)))
        gold = " ".join(rng.choice(vocab, size=rng.integers(0, 4)))
        if rng.random() < 0.5:
            pred = gold  # force frequent EM hits
        em = exact_match(pred, [gold])
        f1 = token_f1(pred, [gold])
        assert 0.0 <= f1 <= 1.0
        if em == 1:
            assert f1 == 1.0


# --- harness ------------------------------------------------------------------

@pytest.fixture(scope="module")
def eval_setup():
    docs, qas, vocab = generate_corpus(21, 8, 2, 60, extra_vocab_texts=(COMPACT_INSTRUCTION,))
    retriever = Retriever(docs, vocab)
    k = 6
    rankings = rankings_by_id([retriever.retrieve(qa, k) for qa in qas])
    corpus = corpus_by_id(docs)
    ctx = EvalContext(
        corpus=corpus, vocab=vocab, queries=tuple(qas), rankings=rankings,
        retriever=retriever, instruction=COMPACT_INSTRUCTION, k=k,
        noisy_spec=NoisyListSpec(3, 2, 1, "original", 0), max_new_tokens=6,
    )
    # memorize the gold answers on the normal-setting prompts themselves
    from opendecoder.evaluation import modulation_scores

    mcfg = ModelConfig(vocab_size=vocab.size, d_model=48, n_heads=4, n_layers=2,
                       d_ff=96, max_context=128, seed=0)
    examples = []
    for qa in qas:
        pdocs = presented_list(ctx, qa, "normal", 0)
        scores = modulation_scores(ctx, qa, pdocs)
        prompt = build_prompt(
            COMPACT_INSTRUCTION, [td.doc for td in pdocs], qa, vocab,
            answer_tokens=tokenize(sorted(qa.gold_answers)[0], vocab),
            doc_scores=scores,
        )
        examples.append(make_example(qa.qa_id, prompt, expand_scores(prompt)))
    result = train(
        init_params(mcfg), mcfg, examples,
        TrainConfig(epochs=150, batch_size=4, lr=5e-3, warmup_steps=30,
                    heldout_fraction=0.0, seed=0),
    )
    return result.params, mcfg, ctx


def test_presented_list_settings(eval_setup):
    params, mcfg, ctx = eval_setup
    qa = ctx.queries[0]
    normal = presented_list(ctx, qa, "normal", 0)
    assert [td.doc.doc_id for td in normal] == list(ctx.rankings[qa.qa_id].doc_ids[: ctx.k])
    noisy = presented_list(ctx, qa, "noisy", 1)
    assert len(noisy) == ctx.k
    extreme = presented_list(ctx, qa, "extreme", 1)
    top = set(ctx.rankings[qa.qa_id].doc_ids[: ctx.k])
    assert all(td.doc.doc_id not in top for td in extreme)


def test_run_eval_normal_memorized(eval_setup):
    params, mcfg, ctx = eval_setup
    summary = run_eval(params, mcfg, ctx, "normal")
    assert summary.em_mean == 100.0
    assert summary.f1_mean == 100.0
    assert len(summary.reports) == 1
    rep = summary.reports[0]
    assert rep.em == pytest.approx(100.0 * np.mean([r.em for r in rep.records]), abs=1e-9)


def test_run_eval_deterministic(eval_setup):
    params, mcfg, ctx = eval_setup
    a = run_eval(params, mcfg, ctx, "noisy", (11, 12))
    b = run_eval(params, mcfg, ctx, "noisy", (11, 12))
    assert a == b


def test_noisy_identity_composition_equals_normal(eval_setup):
    params, mcfg, ctx = eval_setup
    import dataclasses

    ident = dataclasses.replace(ctx, noisy_spec=NoisyListSpec(ctx.k, 0, 0, "original", 0))
    normal = run_eval(params, mcfg, ident, "normal")
    noisy = run_eval(params, mcfg, ident, "noisy", (0,))
    assert noisy.reports[0].records == normal.reports[0].records
    assert noisy.em_mean == normal.em_mean


def test_multi_seed_stats(eval_setup):
    params, mcfg, ctx = eval_setup
    summary = run_eval(params, mcfg, ctx, "extreme", (1, 2, 3))
    assert summary.seeds == (1, 2, 3)
    ems = np.array([r.em for r in summary.reports])
    assert summary.em_mean == pytest.approx(ems.mean(), abs=1e-9)
    assert summary.em_std == pytest.approx(ems.std(), abs=1e-9)  # population
    for rep in summary.reports:
        for rec in rep.records:
            assert rec.em in (0, 1)
            assert 0.0 <= rec.f1 <= 1.0
            if rec.em == 1:
                assert rec.f1 == 1.0


def test_workers_do_not_change_results(eval_setup):
    params, mcfg, ctx = eval_setup
    import dataclasses

    parallel = dataclasses.replace(ctx, workers=4)
    a = run_eval(params, mcfg, ctx, "normal")
    b = run_eval(params, mcfg, parallel, "normal")
    assert a.reports[0].records == b.reports[0].records


def test_missing_ranking_rejected(eval_setup):
    params, mcfg, ctx = eval_setup
    import dataclasses

    broken = dataclasses.replace(
        ctx, rankings={k: v for k, v in list(ctx.rankings.items())[1:]}
    )
    with pytest.raises(ValueError, match="missing retrieval results"):
        run_eval(params, mcfg, broken, "normal")


def test_vocab_mismatch_rejected(eval_setup):
    params, mcfg, ctx = eval_setup
    import dataclasses

    bad = dataclasses.replace(mcfg, vocab_size=mcfg.vocab_size + 1)
    with pytest.raises(ValueError, match="vocab"):
        run_eval(params, bad, ctx, "normal")


def test_topk_sweep_rows_match_run_eval(eval_setup):
    params, mcfg, ctx = eval_setup
    import dataclasses

    rows = topk_sweep(params, mcfg, ctx, [2, 4])
    assert [r[0] for r in rows] == [2, 4]
    for k, f1, em in rows:
        direct = run_eval(params, mcfg, dataclasses.replace(ctx, k=k), "normal")
        assert f1 == direct.f1_mean
        assert em == direct.em_mean


def test_report_files(eval_setup, tmp_path):
    params, mcfg, ctx = eval_setup
    summary = run_eval(params, mcfg, ctx, "noisy", (5,))
    write_report(tmp_path / "report.json", summary)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["setting"] == "noisy"
    assert data["runs"][0]["records"][0]["qa_id"] == ctx.queries[0].qa_id
    write_records_csv(tmp_path / "records.csv", summary)
    lines = (tmp_path / "records.csv").read_text().strip().split("\n")
    assert lines[0] == "seed,qa_id,prediction,best_gold,f1,em"
    assert len(lines) == 1 + len(ctx.queries)
    write_sweep_csv(tmp_path / "sweep.csv", [(2, 50.0, 25.0)])
    assert (tmp_path / "sweep.csv").read_text().startswith("k,f1,em\n2,")
