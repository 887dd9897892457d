"""Seeded feature hashing of message text into unit-norm vectors."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .mpt import PropagationTree

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    vocab_seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError(f"encoder dim must be >= 2, got {self.dim}")


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


@lru_cache(maxsize=65536)
def bucket(token: str, dim: int, vocab_seed: int) -> int:
    """Hash bucket of ``token`` in 1..dim-1; slot 0 is reserved for the bias."""
    key = vocab_seed.to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return 1 + int.from_bytes(digest, "little") % (dim - 1)


def count_vector(cfg: EncoderConfig, tokens) -> np.ndarray:
    """Unnormalised hashed counts including the bias slot."""
    vec = np.zeros(cfg.dim)
    vec[0] = 1.0
    for tok in tokens:
        vec[bucket(tok, cfg.dim, cfg.vocab_seed)] += 1.0
    return vec


def encode_message(cfg: EncoderConfig, text) -> np.ndarray:
    """Encode a message (string or token sequence) as an L2-normalised hashed TF vector."""
    tokens = tokenize(text) if isinstance(text, str) else list(text)
    if not tokens:
        raise ValueError("cannot encode an empty message")
    vec = count_vector(cfg, tokens)
    return vec / np.linalg.norm(vec)


def encode_tree(cfg: EncoderConfig, tree: PropagationTree) -> np.ndarray:
    return np.stack([encode_message(cfg, m.text) for m in tree.messages])
