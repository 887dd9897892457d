"""Message propagation trees: data model, graph statistics and corpus persistence."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MPTError(ValueError):
    """Argument error raised on invalid trees or node indices."""


class DegenerateInputError(MPTError):
    """Raised where a quantity is undefined (zero-norm rows, single-node trees)."""


class CorpusParseError(ValueError):
    def __init__(self, record: int, fieldname: str, reason: str):
        super().__init__(f"record {record}, field {fieldname!r}: {reason}")
        self.record = record
        self.field = fieldname


class Label(enum.IntEnum):
    NONRUMOR = 0
    RUMOR = 1

    @classmethod
    def parse(cls, text: str) -> "Label":
        return {"rumor": cls.RUMOR, "nonrumor": cls.NONRUMOR}[text]

    def to_json(self) -> str:
        return "rumor" if self is Label.RUMOR else "nonrumor"


@dataclass(frozen=True)
class Message:
    id: int
    text: str
    is_injected: bool = False

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise MPTError(f"message {self.id} has empty text")


@dataclass(frozen=True)
class PropagationTree:
    """An immutable MPT. Index 0 is the source post; edges are (parent, child)."""

    messages: tuple[Message, ...]
    edges: tuple[tuple[int, int], ...]
    label: Label
    _degrees: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))
        object.__setattr__(self, "edges", tuple((int(p), int(c)) for p, c in self.edges))
        object.__setattr__(self, "label", Label(self.label))
        validate_tree(self)
        deg = np.zeros(len(self.messages), dtype=np.int64)
        for p, c in self.edges:
            deg[p] += 1
            deg[c] += 1
        deg.setflags(write=False)
        object.__setattr__(self, "_degrees", deg)

    @classmethod
    def build(cls, texts: Sequence[str], edges: Iterable[tuple[int, int]], label: Label,
              injected: Sequence[bool] | None = None) -> "PropagationTree":
        injected = injected if injected is not None else [False] * len(texts)
        msgs = tuple(Message(i, t, bool(f)) for i, (t, f) in enumerate(zip(texts, injected)))
        return cls(msgs, tuple(edges), label)

    @property
    def n(self) -> int:
        return len(self.messages)

    @property
    def texts(self) -> list[str]:
        return [m.text for m in self.messages]

    @property
    def degrees(self) -> np.ndarray:
        return self._degrees

    def parent(self, node: int) -> int | None:
        for p, c in self.edges:
            if c == node:
                return p
        return None

    def with_message(self, text: str, parent: int, injected: bool = True) -> "PropagationTree":
        """Return a copy with one new leaf appended under ``parent``."""
        msg = Message(self.n, text, injected)
        return PropagationTree(self.messages + (msg,), self.edges + ((parent, self.n),), self.label)


def validate_tree(tree: PropagationTree) -> None:
    n = len(tree.messages)
    if n == 0:
        raise MPTError("tree has no messages")
    for i, m in enumerate(tree.messages):
        if m.id != i:
            raise MPTError(f"message at position {i} has id {m.id}")
    if len(tree.edges) != n - 1:
        raise MPTError(f"expected {n - 1} edges for {n} nodes, got {len(tree.edges)}")
    indeg = [0] * n
    children: list[list[int]] = [[] for _ in range(n)]
    for p, c in tree.edges:
        if not (0 <= p < n and 0 <= c < n):
            raise MPTError(f"edge ({p}, {c}) out of range for {n} nodes")
        indeg[c] += 1
        children[p].append(c)
    if indeg[0] != 0:
        raise MPTError("root has a parent")
    for v in range(1, n):
        if indeg[v] != 1:
            raise MPTError(f"node {v} has in-degree {indeg[v]}")
    # n-1 edges + in-degree 1 everywhere: acyclic iff everything is reachable from the root
    seen, stack = {0}, [0]
    while stack:
        for c in children[stack.pop()]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    if len(seen) != n:
        raise MPTError("edges contain a cycle")


def _check_node(tree: PropagationTree, node: int) -> None:
    if not 0 <= node < tree.n:
        raise MPTError(f"node {node} out of range for tree of {tree.n} nodes")


def degree(tree: PropagationTree, node: int) -> int:
    """Undirected degree of ``node``."""
    _check_node(tree, node)
    return int(tree.degrees[node])


def neighbors(tree: PropagationTree, node: int) -> list[int]:
    _check_node(tree, node)
    out = []
    for p, c in tree.edges:
        if p == node:
            out.append(c)
        elif c == node:
            out.append(p)
    return out


TIE_DECIMALS = 9


def influence_scores(tree: PropagationTree) -> np.ndarray:
    """Influence of every node: sum of sqrt(d_u * d_v) over the closed neighbourhood of u."""
    d = tree.degrees.astype(np.float64)
    scores = d.copy()  # self term sqrt(d_u * d_u)
    for p, c in tree.edges:
        term = math.sqrt(d[p] * d[c])
        scores[p] += term
        scores[c] += term
    return scores


def influence_score(tree: PropagationTree, node: int) -> float:
    _check_node(tree, node)
    return float(influence_scores(tree)[node])


@dataclass(frozen=True)
class InfluenceRanking:
    scores: np.ndarray
    order: tuple[int, ...]


def rank_by_influence(tree: PropagationTree) -> InfluenceRanking:
    scores = influence_scores(tree)
    # rounding makes scores that are equal up to summation order tie exactly;
    # lexsort: last key is primary, ties resolved by ascending index
    key = np.round(scores, TIE_DECIMALS)
    order = np.lexsort((np.arange(tree.n), -key))
    return InfluenceRanking(scores, tuple(int(i) for i in order))


def _row_norm(f: np.ndarray, i: int) -> float:
    norm = float(np.linalg.norm(f[i]))
    if norm == 0.0:
        raise DegenerateInputError(f"feature row {i} has zero norm")
    return norm


def pair_homophily(f: np.ndarray, u: int, v: int) -> float:
    """Cosine similarity between feature rows ``u`` and ``v``."""
    f = np.asarray(f)
    for i in (u, v):
        if not 0 <= i < f.shape[0]:
            raise MPTError(f"row {i} out of range")
    val = float(f[u] @ f[v]) / (_row_norm(f, u) * _row_norm(f, v))
    return min(1.0, max(-1.0, val))


def root_homophily(tree: PropagationTree, f: np.ndarray) -> float:
    """Mean cosine between the source post and every other message.

    Normalised by the number of summed terms (n - 1).
    """
    if tree.n < 2:
        raise DegenerateInputError("root homophily needs at least two messages")
    return sum(pair_homophily(f, j, 0) for j in range(1, tree.n)) / (tree.n - 1)


# -- persistence -------------------------------------------------------------

def tree_to_json(tree: PropagationTree) -> dict:
    return {
        "label": tree.label.to_json(),
        "messages": [{"text": m.text, "injected": m.is_injected} for m in tree.messages],
        "edges": [[p, c] for p, c in tree.edges],
    }


def tree_from_json(rec: dict, index: int = 0) -> PropagationTree:
    if not isinstance(rec, dict):
        raise CorpusParseError(index, "<record>", "not an object")
    try:
        label = Label.parse(rec["label"])
    except (KeyError, TypeError):
        raise CorpusParseError(index, "label", f"expected 'rumor' or 'nonrumor', got {rec.get('label')!r}")
    msgs = rec.get("messages")
    if not isinstance(msgs, list) or not msgs:
        raise CorpusParseError(index, "messages", "expected a non-empty list")
    texts, flags = [], []
    for j, m in enumerate(msgs):
        if not isinstance(m, dict) or not isinstance(m.get("text"), str) or not m["text"].strip():
            raise CorpusParseError(index, f"messages[{j}].text", "expected a non-empty string")
        inj = m.get("injected", False)
        if not isinstance(inj, bool):
            raise CorpusParseError(index, f"messages[{j}].injected", "expected a boolean")
        texts.append(m["text"])
        flags.append(inj)
    edges = rec.get("edges")
    if not isinstance(edges, list) or not all(
            isinstance(e, list) and len(e) == 2 and all(isinstance(x, int) for x in e) for e in edges):
        raise CorpusParseError(index, "edges", "expected a list of [parent, child] integer pairs")
    try:
        return PropagationTree.build(texts, [tuple(e) for e in edges], label, flags)
    except MPTError as exc:
        raise CorpusParseError(index, "edges", str(exc)) from None


def save_corpus(trees: Sequence[PropagationTree], path: str | Path) -> None:
    doc = {"trees": [tree_to_json(t) for t in trees]}
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


def load_corpus(path: str | Path) -> list[PropagationTree]:
    raw = Path(path).read_text(encoding="utf-8")
    if not raw.strip():
        return []
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusParseError(-1, "<document>", str(exc)) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("trees"), list):
        raise CorpusParseError(-1, "trees", "expected a top-level 'trees' list")
    return [tree_from_json(rec, i) for i, rec in enumerate(doc["trees"])]
