"""Shared plumbing: stable RNG derivation, hashing, and JSONL file helpers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np


def stable_seed(*parts: Any) -> int:
    """Derive a 63-bit seed from the given parts via SHA-256.

    Unlike ``hash()``, the result is stable across processes and platforms,
    which is what keeps seeded sampling byte-reproducible.
    """
    key = "|".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(*parts: Any) -> np.random.Generator:
    """A fresh generator deterministically keyed by ``parts``."""
    return np.random.default_rng(stable_seed(*parts))


def canonical_json(obj: Any) -> str:
    """Key-sorted, whitespace-free JSON used for fingerprints and artifacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(canonical_json(row))
            fh.write("\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
