"""Byte-level corpus loading and deterministic contiguous splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

VOCAB_SIZE = 256


def bundled_corpus_path() -> Path:
    return Path(str(resources.files("fastweights") / "data" / "corpus.txt"))


def tokenize(data: bytes) -> np.ndarray:
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> bytes:
    return bytes(np.asarray(tokens, dtype=np.uint8).tobytes())


@dataclass
class CorpusSplits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    provenance: dict = field(default_factory=dict)


def load_corpus(path=None, split_fracs=(0.9, 0.05, 0.05), seed: int = 0) -> CorpusSplits:
    """Read ``path`` as bytes and cut it into three contiguous splits.

    The seed rotates the byte stream before cutting (seed 0 keeps file
    order), so different seeds give different held-out regions while each
    split stays a contiguous run of text.
    """
    path = Path(path) if path is not None else bundled_corpus_path()
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    fracs = tuple(float(f) for f in split_fracs)
    if len(fracs) != 3 or any(f <= 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three positive numbers summing to 1, got {fracs}")
    tokens = tokenize(path.read_bytes())
    n = len(tokens)
    if n == 0:
        raise ValueError(f"corpus is empty: {path}")
    if seed:
        offset = int(np.random.default_rng(seed).integers(n))
        tokens = np.roll(tokens, -offset)
    n_train = int(round(fracs[0] * n))
    n_valid = int(round(fracs[1] * n))
    splits = tokens[:n_train], tokens[n_train:n_train + n_valid], tokens[n_train + n_valid:]
    if any(len(s) == 0 for s in splits):
        raise ValueError(f"corpus of {n} bytes is too small for fractions {fracs}")
    return CorpusSplits(*splits, provenance={"path": str(path), "split_fracs": fracs, "seed": seed, "bytes": n})
