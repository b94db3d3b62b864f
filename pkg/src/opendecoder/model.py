"""Tiny decoder-only transformer with score-modulated causal self-attention.

Forward, loss, and reverse-mode gradients are written directly in numpy with
float64 throughout, so analytic gradients can be checked against central
finite differences. Pre-softmax attention logits are multiplied elementwise by
the external score matrix (an additive log-score variant exists behind a
flag), and the causal mask is applied after modulation so masked positions
stay at exactly zero probability regardless of the scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import EOS_ID
from .prompting import ScoreMatrix, SegmentedPrompt
from .util import sha256_bytes

CHECKPOINT_VERSION = 1
LN_EPS = 1e-5

MULTIPLICATIVE = "multiplicative"
ADDITIVE = "additive-variant"
MODULATIONS = (MULTIPLICATIVE, ADDITIVE, "off")

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    max_context: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_context"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


Params = dict[str, np.ndarray]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Named parameter tensors in a fixed, deterministic order."""
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_context, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.ln1.gain"] = (d,)
        shapes[f"{p}.ln1.bias"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{proj}"] = (d, d)
        for proj in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{proj}"] = (d,)
        shapes[f"{p}.ln2.gain"] = (d,)
        shapes[f"{p}.ln2.bias"] = (d,)
        shapes[f"{p}.ff.w1"] = (d, f)
        shapes[f"{p}.ff.b1"] = (f,)
        shapes[f"{p}.ff.w2"] = (f, d)
        shapes[f"{p}.ff.b2"] = (d,)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


def init_params(cfg: ModelConfig) -> Params:
    """Seeded initialization; the output projection is tied to tok_emb."""
    rng = np.random.default_rng(cfg.seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape)
        elif name.endswith(("bias", "b1", "b2", "bq", "bk", "bv", "bo")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return params


def cast_params(params: Params, dtype: str) -> Params:
    """Copy of the parameters in the given float precision.

    Gradient-check builds stay in float64; float32 is acceptable for training
    runs and roughly halves step time. Forward/backward compute in whatever
    precision the parameters carry.
    """
    target = np.dtype(dtype)
    return {name: tensor.astype(target) for name, tensor in params.items()}


def params_checksum(params: Params) -> str:
    blob = b"".join(
        name.encode() + np.ascontiguousarray(params[name]).tobytes()
        for name in sorted(params)
    )
    return sha256_bytes(blob)


def zeros_like_params(params: Params) -> Params:
    return {name: np.zeros_like(tensor) for name, tensor in params.items()}


# --- elementwise pieces -----------------------------------------------------

def _gelu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    t = np.tanh(_GELU_C * (x + _GELU_CUBIC * x * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu(x: np.ndarray) -> np.ndarray:
    return _gelu_forward(x)[0]


def _gelu_grad(x: np.ndarray, t: np.ndarray) -> np.ndarray:
    # t = tanh term cached from the forward pass
    du = _GELU_C * (1.0 + 3.0 * _GELU_CUBIC * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def _layernorm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xn = xc * inv
    return gain * xn + bias, (xn, inv, gain)


def _layernorm_backward(cache, dy):
    xn, inv, gain = cache
    dgain = (dy * xn).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxn = dy * gain
    dx = inv * (
        dxn
        - dxn.mean(axis=-1, keepdims=True)
        - xn * (dxn * xn).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def causal_mask(n: int) -> np.ndarray:
    """Boolean lower-triangular mask: True where attention is permitted."""
    return np.tril(np.ones((n, n), dtype=bool))


def _additive_mask(n: int) -> np.ndarray:
    """0 on permitted positions, -inf above the diagonal."""
    return np.triu(np.full((n, n), -np.inf), k=1)


def _modulate(raw: np.ndarray, s_mat: np.ndarray | None, modulation: str) -> np.ndarray:
    if s_mat is None:
        return raw
    if modulation == MULTIPLICATIVE:
        return raw * s_mat
    if modulation == ADDITIVE:
        return raw + np.log(s_mat)
    raise ValueError(f"unknown modulation {modulation!r}")


def modulated_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    s: np.ndarray | ScoreMatrix | None,
    mask: np.ndarray | None = None,
    modulation: str = MULTIPLICATIVE,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-head modulated causal attention.

    Logits (q k^T / sqrt(d_k)) are modulated by ``s`` first, then masked, then
    row-softmaxed and applied to ``v``. Returns (context, attention weights).
    """
    n, dk = q.shape
    if k.shape != (n, dk) or v.shape[0] != n:
        raise ValueError(
            f"shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    s_mat = None
    if s is not None:
        s_mat = s.entries if isinstance(s, ScoreMatrix) else np.asarray(s, dtype=float)
        if s_mat.ndim == 1:
            s_mat = np.tile(s_mat, (n, 1))
        if s_mat.shape != (n, n):
            raise ValueError(f"score matrix shape {s_mat.shape} != ({n}, {n})")
        if np.any(s_mat <= 0.0) or np.any(s_mat > 1.0):
            raise ValueError("score matrix entries must lie in (0, 1]")
    if mask is None:
        mask = causal_mask(n)
    raw = q @ k.T / math.sqrt(dk)
    mod = _modulate(raw, s_mat, modulation)
    probs = _softmax_rows(np.where(mask, mod, -np.inf))
    return probs @ v, probs


@dataclass
class AttentionTrace:
    """Post-softmax attention weights, one (n_heads, n, n) array per layer."""

    layers: tuple[np.ndarray, ...]


def _as_score_matrix(scores, n: int) -> np.ndarray | None:
    if scores is None:
        return None
    if isinstance(scores, ScoreMatrix):
        mat = scores.entries
    else:
        arr = np.asarray(scores, dtype=float)
        mat = np.tile(arr, (n, 1)) if arr.ndim == 1 else arr
    if mat.shape != (n, n):
        raise ValueError(f"score matrix shape {mat.shape} does not match length {n}")
    if np.any(mat <= 0.0) or np.any(mat > 1.0):
        raise ValueError("score matrix entries must lie in (0, 1]")
    return mat


def _forward(
    params: Params,
    cfg: ModelConfig,
    tokens: Sequence[int],
    scores,
    modulation: str,
    want_cache: bool,
    want_trace: bool,
    logit_rows: np.ndarray | None = None,
):
    n = len(tokens)
    if n == 0:
        raise ValueError("cannot run the model on an empty token sequence")
    if n > cfg.max_context:
        raise ValueError(f"sequence length {n} exceeds max_context {cfg.max_context}")
    toks = np.asarray(tokens, dtype=np.int64)
    dtype = params["tok_emb"].dtype
    s_mat = _as_score_matrix(scores, n)
    if s_mat is not None and s_mat.dtype != dtype:
        s_mat = s_mat.astype(dtype)
    neg_mask = _additive_mask(n).astype(dtype)
    dk = cfg.d_head
    heads = cfg.n_heads
    scale = 1.0 / math.sqrt(dk)

    x = params["tok_emb"][toks] + params["pos_emb"][:n]
    layer_caches = []
    trace_layers = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        a, ln1c = _layernorm_forward(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
        q = a @ params[f"{p}.attn.wq"] + params[f"{p}.attn.bq"]
        k = a @ params[f"{p}.attn.wk"] + params[f"{p}.attn.bk"]
        v = a @ params[f"{p}.attn.wv"] + params[f"{p}.attn.bv"]
        # head-major (H, n, d_head) layout so attention runs as batched GEMMs
        qh = np.ascontiguousarray(q.reshape(n, heads, dk).transpose(1, 0, 2))
        kh = np.ascontiguousarray(k.reshape(n, heads, dk).transpose(1, 0, 2))
        vh = np.ascontiguousarray(v.reshape(n, heads, dk).transpose(1, 0, 2))
        raw = qh @ kh.transpose(0, 2, 1) * scale  # (H, n, n)
        mod = _modulate(raw, s_mat[None] if s_mat is not None else None, modulation)
        probs = _softmax_rows(mod + neg_mask[None])
        ctx = (probs @ vh).transpose(1, 0, 2).reshape(n, cfg.d_model)
        attn_out = ctx @ params[f"{p}.attn.wo"] + params[f"{p}.attn.bo"]
        x_attn = x + attn_out
        f, ln2c = _layernorm_forward(
            x_attn, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"]
        )
        h1 = f @ params[f"{p}.ff.w1"] + params[f"{p}.ff.b1"]
        act, gelu_t = _gelu_forward(h1)
        x = x_attn + act @ params[f"{p}.ff.w2"] + params[f"{p}.ff.b2"]
        if want_trace:
            trace_layers.append(probs)
        if want_cache:
            layer_caches.append(
                dict(a=a, ln1c=ln1c, qh=qh, kh=kh, vh=vh, raw=raw, probs=probs,
                     ctx=ctx, ln2c=ln2c, f=f, h1=h1, gelu_t=gelu_t, act=act)
            )
    xf, lnfc = _layernorm_forward(x, params["ln_f.gain"], params["ln_f.bias"])
    if logit_rows is None:
        logits = xf @ params["tok_emb"].T
    else:
        logits = xf[logit_rows] @ params["tok_emb"].T
    cache = None
    if want_cache:
        cache = dict(tokens=toks, s_mat=s_mat, layers=layer_caches,
                     xf=xf, lnfc=lnfc, modulation=modulation)
    trace = AttentionTrace(tuple(trace_layers)) if want_trace else None
    return logits, cache, trace


def forward(
    params: Params,
    cfg: ModelConfig,
    prompt: SegmentedPrompt | Sequence[int],
    scores: ScoreMatrix | np.ndarray | None = None,
    modulation: str = MULTIPLICATIVE,
    want_trace: bool = False,
):
    """Next-token logits for every position.

    ``scores=None`` runs the plain unmodulated transformer (a genuinely
    separate code path, used as the identity-modulation reference). The same
    score matrix is applied at every layer and head.
    """
    tokens = prompt.tokens if isinstance(prompt, SegmentedPrompt) else prompt
    logits, _, trace = _forward(
        params, cfg, tokens, scores, modulation, want_cache=False, want_trace=want_trace
    )
    return (logits, trace) if want_trace else logits


def _nll_from_rows(row_logits: np.ndarray, targets: np.ndarray):
    """Mean NLL over ``targets`` plus the gradient w.r.t. the row logits."""
    m = len(targets)
    shifted = row_logits - row_logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    z = exp.sum(axis=1, keepdims=True)
    logp = shifted[np.arange(m), targets] - np.log(z[:, 0])
    loss = -float(logp.mean())
    drows = exp / z
    drows[np.arange(m), targets] -= 1.0
    drows /= m
    return loss, drows


def _answer_rows(start: int, end: int) -> np.ndarray:
    # positions predicting tokens[start:end] under next-token shift
    return np.arange(start - 1, end - 1)


def _answer_span(prompt: SegmentedPrompt) -> tuple[int, int]:
    seg = prompt.answer_segment
    if seg is None:
        raise ValueError("prompt has no answer segment")
    return seg.start, seg.end


def sequence_loss(
    params: Params,
    cfg: ModelConfig,
    tokens: Sequence[int],
    scores,
    answer_start: int,
    answer_end: int,
    modulation: str = MULTIPLICATIVE,
) -> float:
    """Loss only, computing logits just at the answer positions."""
    rows = _answer_rows(answer_start, answer_end)
    row_logits, _, _ = _forward(
        params, cfg, tokens, scores, modulation,
        want_cache=False, want_trace=False, logit_rows=rows,
    )
    targets = np.asarray(tokens, dtype=np.int64)[answer_start:answer_end]
    value, _ = _nll_from_rows(row_logits, targets)
    return value


def loss(
    params: Params,
    cfg: ModelConfig,
    prompt: SegmentedPrompt,
    scores: ScoreMatrix | np.ndarray | None = None,
    modulation: str = MULTIPLICATIVE,
) -> float:
    """Mean negative log-likelihood over answer-segment tokens (incl. EOS)."""
    start, end = _answer_span(prompt)
    return sequence_loss(params, cfg, prompt.tokens, scores, start, end, modulation)


def loss_and_grads(
    params: Params,
    cfg: ModelConfig,
    tokens: Sequence[int],
    scores,
    answer_start: int,
    answer_end: int,
    modulation: str = MULTIPLICATIVE,
    grad_out: Params | None = None,
):
    """Loss plus gradients for every parameter tensor and the score vector.

    Returns (loss, grads, dscores) where dscores is the gradient with respect
    to the per-token score vector (None when running unmodulated). When
    ``grad_out`` is given, gradients are accumulated into it in place.
    """
    rows = _answer_rows(answer_start, answer_end)
    row_logits, cache, _ = _forward(
        params, cfg, tokens, scores, modulation,
        want_cache=True, want_trace=False, logit_rows=rows,
    )
    toks = cache["tokens"]
    targets = toks[answer_start:answer_end]
    value, drows = _nll_from_rows(row_logits, targets)

    grads = zeros_like_params(params) if grad_out is None else grad_out
    s_mat = cache["s_mat"]
    d_s_mat = np.zeros_like(s_mat) if s_mat is not None else None
    dk = cfg.d_head
    scale = 1.0 / math.sqrt(dk)

    grads["tok_emb"] += drows.T @ cache["xf"][rows]
    dxf = np.zeros_like(cache["xf"])
    dxf[rows] = drows @ params["tok_emb"]
    dx, dg, db = _layernorm_backward(cache["lnfc"], dxf)
    grads["ln_f.gain"] += dg
    grads["ln_f.bias"] += db

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        lc = cache["layers"][i]
        # feed-forward residual
        dh2 = dx
        grads[f"{p}.ff.w2"] += lc["act"].T @ dh2
        grads[f"{p}.ff.b2"] += dh2.sum(axis=0)
        dact = dh2 @ params[f"{p}.ff.w2"].T
        dh1 = dact * _gelu_grad(lc["h1"], lc["gelu_t"])
        grads[f"{p}.ff.w1"] += lc["f"].T @ dh1
        grads[f"{p}.ff.b1"] += dh1.sum(axis=0)
        df = dh1 @ params[f"{p}.ff.w1"].T
        dx_ln2, dg, db = _layernorm_backward(lc["ln2c"], df)
        grads[f"{p}.ln2.gain"] += dg
        grads[f"{p}.ln2.bias"] += db
        dx = dx + dx_ln2
        # attention residual
        d_attn_out = dx
        grads[f"{p}.attn.wo"] += lc["ctx"].T @ d_attn_out
        grads[f"{p}.attn.bo"] += d_attn_out.sum(axis=0)
        dctx = d_attn_out @ params[f"{p}.attn.wo"].T
        n = dctx.shape[0]
        dctxh = np.ascontiguousarray(
            dctx.reshape(n, cfg.n_heads, dk).transpose(1, 0, 2)
        )
        probs = lc["probs"]
        dprobs = dctxh @ lc["vh"].transpose(0, 2, 1)
        dvh = probs.transpose(0, 2, 1) @ dctxh
        dz = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        if s_mat is None:
            draw = dz
        elif cache["modulation"] == MULTIPLICATIVE:
            draw = dz * s_mat[None]
            d_s_mat += (dz * lc["raw"]).sum(axis=0)
        else:
            draw = dz
            d_s_mat += dz.sum(axis=0) / s_mat
        dqh = draw @ lc["kh"] * scale
        dkh = draw.transpose(0, 2, 1) @ lc["qh"] * scale
        dq = dqh.transpose(1, 0, 2).reshape(n, cfg.d_model)
        dk_ = dkh.transpose(1, 0, 2).reshape(n, cfg.d_model)
        dv = dvh.transpose(1, 0, 2).reshape(n, cfg.d_model)
        a = lc["a"]
        grads[f"{p}.attn.wq"] += a.T @ dq
        grads[f"{p}.attn.bq"] += dq.sum(axis=0)
        grads[f"{p}.attn.wk"] += a.T @ dk_
        grads[f"{p}.attn.bk"] += dk_.sum(axis=0)
        grads[f"{p}.attn.wv"] += a.T @ dv
        grads[f"{p}.attn.bv"] += dv.sum(axis=0)
        da = (
            dq @ params[f"{p}.attn.wq"].T
            + dk_ @ params[f"{p}.attn.wk"].T
            + dv @ params[f"{p}.attn.wv"].T
        )
        dx_ln1, dg, db = _layernorm_backward(lc["ln1c"], da)
        grads[f"{p}.ln1.gain"] += dg
        grads[f"{p}.ln1.bias"] += db
        dx = dx + dx_ln1

    np.add.at(grads["tok_emb"], toks, dx)
    grads["pos_emb"][: len(toks)] += dx

    dscores = d_s_mat.sum(axis=0) if d_s_mat is not None else None
    return value, grads, dscores


def generate(
    params: Params,
    cfg: ModelConfig,
    prompt: SegmentedPrompt,
    scores: ScoreMatrix | np.ndarray | None = None,
    max_new_tokens: int = 8,
    modulation: str = MULTIPLICATIVE,
) -> tuple[int, ...]:
    """Greedy decoding until EOS, max_new_tokens, or the context limit.

    Ties resolve to the lowest token index (argmax convention). Generated
    positions extend the score vector with 1.0. The emitted sequence excludes
    the terminating EOS.
    """
    if prompt.answer_segment is not None:
        raise ValueError("generation prompt must not contain an answer segment")
    tokens = list(prompt.tokens)
    if scores is None:
        vec = None
    elif isinstance(scores, ScoreMatrix):
        vec = list(scores.token_scores)
    else:
        arr = np.asarray(scores, dtype=float)
        vec = list(arr if arr.ndim == 1 else arr[0])
    out: list[int] = []
    for _ in range(max_new_tokens):
        if len(tokens) >= cfg.max_context:
            break
        last = np.array([len(tokens) - 1])
        row_logits, _, _ = _forward(
            params, cfg, tokens, None if vec is None else np.asarray(vec),
            modulation, want_cache=False, want_trace=False, logit_rows=last,
        )
        nxt = int(np.argmax(row_logits[0]))
        if nxt == EOS_ID:
            break
        tokens.append(nxt)
        if vec is not None:
            vec.append(1.0)
        out.append(nxt)
    return tuple(out)


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(
    path: str | Path,
    params: Params,
    cfg: ModelConfig,
    seed: int,
    step: int,
) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(cfg),
        "seed": seed,
        "step": step,
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **params)


def load_checkpoint(path: str | Path) -> tuple[Params, ModelConfig, dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path} is not a checkpoint (missing metadata)")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('version')!r}"
            )
        params = {k: data[k] for k in data.files if k != "__meta__"}
    cfg = ModelConfig(**meta["config"])
    expected = param_shapes(cfg)
    if set(params) != set(expected):
        raise ValueError("checkpoint tensors do not match the stored config")
    return params, cfg, meta
