"""Adam training loop with gradient clipping, warmup, and a CSV step log."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import ModelConfig, Params, loss_and_grads, sequence_loss, zeros_like_params
from .prompting import ScoreMatrix, SegmentedPrompt
from .util import rng_for


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainExample:
    example_id: str
    tokens: tuple[int, ...]
    token_scores: tuple[float, ...] | None  # None trains unmodulated
    answer_start: int
    answer_end: int


def make_example(
    example_id: str,
    prompt: SegmentedPrompt,
    scores: ScoreMatrix | Sequence[float] | None,
) -> TrainExample:
    seg = prompt.answer_segment
    if seg is None:
        raise ValueError("training prompts must contain an answer segment")
    if isinstance(scores, ScoreMatrix):
        vec = tuple(float(v) for v in scores.token_scores)
    elif scores is None:
        vec = None
    else:
        vec = tuple(float(v) for v in scores)
    return TrainExample(example_id, prompt.tokens, vec, seg.start, seg.end)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 0
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    heldout_fraction: float = 0.05
    modulation: str = "multiplicative"
    freeze_non_attention: bool = False


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    heldout_loss: float | None


@dataclass
class TrainResult:
    params: Params
    steps: int
    epoch_stats: list[EpochStats] = field(default_factory=list)


DatasetProvider = Callable[[int], Sequence[TrainExample]]


def _example_loss(params, mcfg, ex: TrainExample, modulation) -> float:
    scores = None if ex.token_scores is None else np.asarray(ex.token_scores)
    return sequence_loss(
        params, mcfg, ex.tokens, scores, ex.answer_start, ex.answer_end,
        modulation=modulation,
    )


def global_grad_norm(grads: Params) -> float:
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))


def train(
    params: Params,
    mcfg: ModelConfig,
    dataset: Sequence[TrainExample] | DatasetProvider,
    tcfg: TrainConfig,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Mini-batch Adam over the dataset; deterministic for a fixed seed.

    ``dataset`` may be a fixed sequence or a callable mapping epoch index to
    that epoch's examples (used for per-epoch resampled noisy lists). Gradients
    are accumulated over each batch in a fixed order, the global norm is
    clipped at ``clip_norm``, and the learning rate warms up linearly for
    ``warmup_steps`` steps, then stays constant. A non-finite loss aborts with
    the offending batch id. The held-out slice of each epoch is scored but not
    trained on, and its loss is reported in the epoch stats.
    """
    if not callable(dataset) and len(dataset) == 0:
        raise ValueError("training dataset must be non-empty")
    params = {k: v.copy() for k, v in params.items()}
    m = zeros_like_params(params)
    v = zeros_like_params(params)
    step = 0
    result = TrainResult(params=params, steps=0)

    trainable = set(params)
    if tcfg.freeze_non_attention:
        trainable = {name for name in params if ".attn." in name}

    log_rows: list[tuple[int, float, float, float]] = []
    for epoch in range(tcfg.epochs):
        examples = list(dataset(epoch)) if callable(dataset) else list(dataset)
        if not examples:
            raise ValueError(f"epoch {epoch} produced an empty dataset")
        order = rng_for("train-shuffle", tcfg.seed, epoch).permutation(len(examples))
        n_held = int(round(tcfg.heldout_fraction * len(examples)))
        n_held = min(n_held, len(examples) - 1)
        held = [examples[i] for i in order[:n_held]]
        train_idx = order[n_held:]

        epoch_losses = []
        grads_sum = zeros_like_params(params)
        for lo in range(0, len(train_idx), tcfg.batch_size):
            batch = train_idx[lo : lo + tcfg.batch_size]
            for name in grads_sum:
                grads_sum[name][...] = 0.0
            batch_loss = 0.0
            for i in batch:
                ex = examples[i]
                scores = None if ex.token_scores is None else np.asarray(ex.token_scores)
                value, _, _ = loss_and_grads(
                    params, mcfg, ex.tokens, scores,
                    ex.answer_start, ex.answer_end,
                    modulation=tcfg.modulation, grad_out=grads_sum,
                )
                batch_loss += value
            batch_loss /= len(batch)
            if not np.isfinite(batch_loss):
                first = examples[batch[0]].example_id
                raise TrainingDiverged(
                    f"non-finite loss at batch {step} (first example {first})"
                )
            for name in grads_sum:
                grads_sum[name] /= len(batch)

            norm = global_grad_norm(grads_sum)
            if tcfg.clip_norm and norm > tcfg.clip_norm:
                scale = tcfg.clip_norm / norm
                for name in grads_sum:
                    grads_sum[name] *= scale

            step += 1
            if tcfg.warmup_steps > 0:
                lr = tcfg.lr * min(1.0, step / tcfg.warmup_steps)
            else:
                lr = tcfg.lr
            b1c = 1.0 - tcfg.beta1**step
            b2c = 1.0 - tcfg.beta2**step
            for name in params:
                if name not in trainable:
                    continue
                g = grads_sum[name]
                m[name] = tcfg.beta1 * m[name] + (1.0 - tcfg.beta1) * g
                v[name] = tcfg.beta2 * v[name] + (1.0 - tcfg.beta2) * g * g
                update = (m[name] / b1c) / (np.sqrt(v[name] / b2c) + tcfg.adam_eps)
                params[name] -= lr * update

            epoch_losses.append(batch_loss)
            log_rows.append((step, batch_loss, norm, lr))

        heldout_loss = None
        if held:
            heldout_loss = float(
                np.mean([_example_loss(params, mcfg, ex, tcfg.modulation) for ex in held])
            )
        result.epoch_stats.append(
            EpochStats(epoch, float(np.mean(epoch_losses)), heldout_loss)
        )

    result.steps = step
    if log_path is not None:
        with open(log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "grad_norm", "lr"])
            for row in log_rows:
                writer.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}", f"{row[3]:.10g}"])
    return result
