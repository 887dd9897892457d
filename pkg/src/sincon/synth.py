"""Synthetic labelled propagation-tree corpora."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mpt import Label, PropagationTree

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh")
_VOWELS = ("a", "e", "i", "o", "u")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    """Knobs of the generator.

    ``separation`` in [0, 1] interpolates both token mixture and tree shape
    between identical classes (0) and disjoint class vocabularies (1).
    """

    n_trees: int = 500
    min_nodes: int = 5
    max_nodes: int = 40
    separation: float = 0.7
    vocab_per_class: int = 60
    min_tokens: int = 4
    max_tokens: int = 10
    rumor_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ConfigError("n_trees must be positive")
        if not 1 <= self.min_nodes <= self.max_nodes:
            raise ConfigError(f"invalid node range {self.min_nodes}..{self.max_nodes}")
        if not 0.0 <= self.separation <= 1.0:
            raise ConfigError("separation must lie in [0, 1]")
        if self.vocab_per_class < 1:
            raise ConfigError("vocab_per_class must be positive")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError(f"invalid token range {self.min_tokens}..{self.max_tokens}")
        if not 0.0 < self.rumor_fraction < 1.0:
            raise ConfigError("rumor_fraction must lie in (0, 1)")


def make_vocab(size: int, rng: np.random.Generator, taken: set[str]) -> list[str]:
    words = []
    while len(words) < size:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.integers(2, 4)))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def class_vocabularies(spec: CorpusSpec) -> dict[Label, list[str]]:
    rng = np.random.default_rng([spec.seed, 7])
    taken: set[str] = set()
    return {Label.RUMOR: make_vocab(spec.vocab_per_class, rng, taken),
            Label.NONRUMOR: make_vocab(spec.vocab_per_class, rng, taken)}


def _root_attach_prob(label: Label, s: float) -> float:
    # rumours cascade deep, non-rumours fan out from the source
    return 0.5 - 0.3 * s if label == Label.RUMOR else 0.5 + 0.3 * s


def _message(rng, label: Label, vocabs, s: float, spec: CorpusSpec) -> str:
    own, other = vocabs[label], vocabs[Label(1 - label)]
    n_tok = rng.integers(spec.min_tokens, spec.max_tokens + 1)
    from_own = rng.random(n_tok) < (1.0 + s) / 2.0
    return " ".join(own[rng.integers(len(own))] if o else other[rng.integers(len(other))]
                    for o in from_own)


def synth_tree(rng: np.random.Generator, label: Label, vocabs, spec: CorpusSpec) -> PropagationTree:
    s = spec.separation
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    p_root = _root_attach_prob(label, s)
    edges = []
    for child in range(1, n):
        if child == 1 or rng.random() < p_root:
            parent = 0
        else:
            parent = int(rng.integers(1, child))
        edges.append((parent, child))
    texts = [_message(rng, label, vocabs, s, spec) for _ in range(n)]
    return PropagationTree.build(texts, edges, label)


def synth_corpus(spec: CorpusSpec, seed: int | None = None) -> list[PropagationTree]:
    """Deterministic labelled corpus; ``seed`` overrides ``spec.seed`` for the trees."""
    spec.validate()
    vocabs = class_vocabularies(spec)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n_rumor = int(round(spec.n_trees * spec.rumor_fraction))
    labels = [Label.RUMOR] * n_rumor + [Label.NONRUMOR] * (spec.n_trees - n_rumor)
    labels = [labels[i] for i in rng.permutation(len(labels))]
    return [synth_tree(rng, lab, vocabs, spec) for lab in labels]


def corpus_vocabulary(spec: CorpusSpec) -> list[str]:
    vocabs = class_vocabularies(spec)
    return sorted(vocabs[Label.RUMOR] + vocabs[Label.NONRUMOR])


def stratified_split(trees, test_fraction: float, seed: int):
    """Seeded split keeping the label ratio in both parts; returns (train_idx, test_idx)."""
    rng = np.random.default_rng([seed, 3])
    train, test = [], []
    for lab in (Label.NONRUMOR, Label.RUMOR):
        idx = np.array([i for i, t in enumerate(trees) if t.label == lab], dtype=int)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(len(idx) * test_fraction))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return sorted(train), sorted(test)
