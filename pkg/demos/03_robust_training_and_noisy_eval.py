"""End-to-end miniature of the main experiment: train a score-modulated model
and a uniform-score control on the same corpus, then compare them under the
Normal / Noisy / Extreme evaluation settings.

Runs in a few minutes on a laptop CPU (scaled-down corpus and budget).

Run:  python3 demos/03_robust_training_and_noisy_eval.py
"""

from opendecoder import generate_corpus
from opendecoder.config import config_from_dict
from opendecoder.corpus import corpus_by_id
from opendecoder.evaluation import run_eval
from opendecoder.pipeline import LoadedData, eval_context, train_model
from opendecoder.prompting import COMPACT_INSTRUCTION
from opendecoder.retrieval import Retriever, rankings_by_id

cfg = config_from_dict({
    "instruction": COMPACT_INSTRUCTION,
    "corpus": {"seed": 7, "n_entities": 40, "n_relations": 2, "n_distractors": 200},
    "retrieval": {"k": 10},
    "noisy": {"order": "shuffle"},
    "training": {
        "n_heads": 4, "epochs": 120, "batch_size": 4, "lr": 3e-3,
        "warmup_steps": 100, "failure_fraction": 0.25, "heldout_fraction": 0.0,
        "precision": "float32",
    },
    "eval": {"seeds": [11, 12, 13]},
})

docs, qas, vocab = generate_corpus(
    cfg.corpus.seed, cfg.corpus.n_entities, cfg.corpus.n_relations,
    cfg.corpus.n_distractors, extra_vocab_texts=(cfg.instruction,),
)
retriever = Retriever(docs, vocab, cfg.retrieval.dim)
rankings = rankings_by_id([retriever.retrieve(qa, cfg.retrieval.k) for qa in qas])
data = LoadedData(docs, corpus_by_id(docs), qas, vocab, rankings, retriever)
print(f"corpus: {len(docs)} docs, {len(qas)} QAs, vocab {vocab.size}")

print("\ntraining the score-modulated model (robust lists)...")
params_mod, mcfg, _ = train_model(cfg, data)
print("training the uniform-score control (vanilla lists)...")
params_ctl, _, _ = train_model(cfg, data, modulation="off", robust=False)

print(f"\n{'setting':8s} {'modulated EM':>14s} {'control EM':>12s}")
for setting in ("normal", "noisy", "extreme"):
    row = []
    for name, params, mod in (("mod", params_mod, None), ("ctl", params_ctl, "off")):
        ctx = eval_context(cfg, data, modulation=mod)
        summary = run_eval(params, mcfg, ctx, setting, cfg.eval.seeds)
        row.append(summary.em_mean)
    print(f"{setting:8s} {row[0]:14.2f} {row[1]:12.2f}")

print("\nthe gap should be small under Normal and large under Extreme: the "
      "modulated model learned to fall back on its parametric memory when "
      "the presented documents do not match the question.")
