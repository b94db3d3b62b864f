"""Run configuration: a single YAML file with strict validation.

Every field has a default; unknown keys and invalid enum values are rejected,
and validation reports every violation at once rather than stopping at the
first. The canonical JSON form of a config is hashed into the fingerprint
recorded by every pipeline stage manifest.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .indicators import AGGREGATIONS, SCHEMES
from .model import MODULATIONS
from .prompting import DEFAULT_INSTRUCTION
from .robustness import ORDERS
from .util import canonical_json, sha256_text


class ConfigError(ValueError):
    """Raised with one newline-separated message per violation."""


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 7
    n_entities: int = 200
    n_relations: int = 3
    n_distractors: int = 2000


@dataclass(frozen=True)
class RetrievalConfig:
    dim: int = 64
    k: int = 10


@dataclass(frozen=True)
class IndicatorConfig:
    scheme: str = "max"
    aggregation: str = "all"
    weight: float = 0.5
    raw_denominator: bool = False
    ranker_seed: int = 0
    ranker_noise: float = 0.1


@dataclass(frozen=True)
class NoisyConfig:
    n_relevant: int = 5
    n_partial: int = 3
    n_irrelevant: int = 2
    order: str = "original"


@dataclass(frozen=True)
class TrainingConfig:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    max_context: int = 192
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    lr: float = 3e-3
    warmup_steps: int = 50
    clip_norm: float = 1.0
    heldout_fraction: float = 0.05
    robust: bool = True
    order: str = "original"
    failure_fraction: float = 0.2
    resample_every: int = 1  # rebuild noisy lists every N epochs; 0 = fixed
    freeze_non_attention: bool = False
    precision: str = "float64"  # float32 halves step time for training runs


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = (11, 12, 13, 14, 15)
    max_new_tokens: int = 8


@dataclass(frozen=True)
class SweepConfig:
    ks: tuple[int, ...] = (2, 5, 10)


@dataclass(frozen=True)
class AblateConfig:
    modulations: tuple[str, ...] = ("multiplicative", "off")
    robust: tuple[bool, ...] = (True, False)
    aggregations: tuple[str, ...] = ("all",)
    epochs: int | None = None  # None -> training.epochs


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"
    workers: int = 1
    instruction: str = DEFAULT_INSTRUCTION
    modulation: str = "multiplicative"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    indicators: IndicatorConfig = field(default_factory=IndicatorConfig)
    noisy: NoisyConfig = field(default_factory=NoisyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of the result-determining configuration.

        out_dir and workers are excluded: where artifacts land and how many
        evaluation workers run never changes their bytes.
        """
        payload = self.to_dict()
        payload.pop("out_dir")
        payload.pop("workers")
        return sha256_text(canonical_json(_jsonable(payload)))


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


_SECTION_TYPES = {
    "corpus": CorpusConfig,
    "retrieval": RetrievalConfig,
    "indicators": IndicatorConfig,
    "noisy": NoisyConfig,
    "training": TrainingConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "ablate": AblateConfig,
}

_OPTIONAL_NONE_FIELDS = {"epochs"}  # AblateConfig.epochs


def _coerce(value: Any, target, path: str, errors: list[str]) -> Any:
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected integer, got {value!r}")
            return 0
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected number, got {value!r}")
            return 0.0
        return float(value)
    if target is bool:
        if not isinstance(value, bool):
            errors.append(f"{path}: expected boolean, got {value!r}")
            return False
        return value
    if target is str:
        if not isinstance(value, str):
            errors.append(f"{path}: expected string, got {value!r}")
            return ""
        return value
    return value


def _build_section(cls, data: Any, path: str, errors: list[str]):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(f"{path}: expected a mapping, got {data!r}")
        return cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    for key in unknown:
        errors.append(f"{path}.{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        fpath = f"{path}.{name}"
        ftype = f.type if isinstance(f.type, type) else None
        if name in _OPTIONAL_NONE_FIELDS and value is None:
            kwargs[name] = None
        elif str(f.type).startswith("tuple") or isinstance(f.default, tuple):
            if not isinstance(value, (list, tuple)):
                errors.append(f"{fpath}: expected a list, got {value!r}")
                continue
            kwargs[name] = tuple(value)
        elif isinstance(f.default, bool):
            kwargs[name] = _coerce(value, bool, fpath, errors)
        elif isinstance(f.default, int):
            kwargs[name] = _coerce(value, int, fpath, errors)
        elif isinstance(f.default, float):
            kwargs[name] = _coerce(value, float, fpath, errors)
        elif isinstance(f.default, str):
            kwargs[name] = _coerce(value, str, fpath, errors)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path}: {exc}")
        return cls()


def config_from_dict(data: dict | None) -> RunConfig:
    """Build and fully validate a RunConfig, reporting all violations."""
    errors: list[str] = []
    data = dict(data or {})

    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    for key in sorted(set(data) - top_fields):
        errors.append(f"{key}: unknown key")

    kwargs: dict[str, Any] = {}
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name, errors)
    for name, target in (("seed", int), ("out_dir", str), ("workers", int),
                         ("instruction", str), ("modulation", str)):
        if name in data:
            kwargs[name] = _coerce(data[name], target, name, errors)

    cfg = RunConfig(**{k: v for k, v in kwargs.items() if k in top_fields})
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError("\n".join(errors))
    return cfg


def validate(cfg: RunConfig) -> list[str]:
    """Every constraint violation in the config, as one message each."""
    errors = []
    if cfg.modulation not in MODULATIONS:
        errors.append(f"modulation: {cfg.modulation!r} not in {MODULATIONS}")
    if cfg.indicators.scheme not in SCHEMES:
        errors.append(f"indicators.scheme: {cfg.indicators.scheme!r} not in {SCHEMES}")
    if cfg.indicators.aggregation not in AGGREGATIONS:
        errors.append(
            f"indicators.aggregation: {cfg.indicators.aggregation!r} not in {AGGREGATIONS}"
        )
    if cfg.noisy.order not in ORDERS:
        errors.append(f"noisy.order: {cfg.noisy.order!r} not in {ORDERS}")
    if cfg.training.order not in ORDERS:
        errors.append(f"training.order: {cfg.training.order!r} not in {ORDERS}")
    for mod in cfg.ablate.modulations:
        if mod not in MODULATIONS:
            errors.append(f"ablate.modulations: {mod!r} not in {MODULATIONS}")
    for agg in cfg.ablate.aggregations:
        if agg not in AGGREGATIONS:
            errors.append(f"ablate.aggregations: {agg!r} not in {AGGREGATIONS}")
    if cfg.corpus.n_entities < 2:
        errors.append("corpus.n_entities: must be >= 2")
    if cfg.corpus.n_relations < 1:
        errors.append("corpus.n_relations: must be >= 1")
    if cfg.corpus.n_distractors < 0:
        errors.append("corpus.n_distractors: must be >= 0")
    if cfg.retrieval.dim < 1:
        errors.append("retrieval.dim: must be >= 1")
    if cfg.retrieval.k < 1:
        errors.append("retrieval.k: must be >= 1")
    noisy_total = cfg.noisy.n_relevant + cfg.noisy.n_partial + cfg.noisy.n_irrelevant
    if noisy_total != cfg.retrieval.k:
        errors.append(
            f"noisy: composition totals {noisy_total} but retrieval.k is {cfg.retrieval.k}"
        )
    if cfg.training.d_model % cfg.training.n_heads != 0:
        errors.append(
            f"training: d_model {cfg.training.d_model} not divisible by "
            f"n_heads {cfg.training.n_heads}"
        )
    if not 0.0 <= cfg.training.failure_fraction <= 1.0:
        errors.append("training.failure_fraction: must be in [0, 1]")
    if cfg.training.precision not in ("float32", "float64"):
        errors.append(
            f"training.precision: {cfg.training.precision!r} not in ('float32', 'float64')"
        )
    if cfg.training.resample_every < 0:
        errors.append("training.resample_every: must be >= 0")
    if not 0.0 <= cfg.training.heldout_fraction < 1.0:
        errors.append("training.heldout_fraction: must be in [0, 1)")
    if cfg.training.epochs < 1:
        errors.append("training.epochs: must be >= 1")
    if cfg.training.batch_size < 1:
        errors.append("training.batch_size: must be >= 1")
    if cfg.workers < 1:
        errors.append("workers: must be >= 1")
    if not cfg.eval.seeds:
        errors.append("eval.seeds: must be non-empty")
    if not cfg.sweep.ks:
        errors.append("sweep.ks: must be non-empty")
    return errors


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML config file; ``None`` gives the documented defaults."""
    if path is None:
        return config_from_dict({})
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return config_from_dict(data)
