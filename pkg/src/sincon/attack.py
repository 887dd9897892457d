"""Message-injection attack on rumor trees with a pluggable message generator."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .detector import Prediction
from .encode import EncoderConfig, bucket, count_vector, encode_message, tokenize
from .mpt import Label, PropagationTree, pair_homophily, rank_by_influence, root_homophily

log = logging.getLogger(__name__)

INITIAL_PROMPT = (
    "Instruction: Your mission is to construct a sentence that bears the least semantic "
    "similarity to the user’s inputs while maintaining a similar overarching topic. "
    "Cosine similarity will be used to evaluate the dissimilarity."
)
REFINE_PROMPT = (
    "Instruction: The similarity between the generated sentence and the input sentence is "
    "{similarity}.\n\nPlease generate a new sentence."
)


class AttackError(RuntimeError):
    def __init__(self, message: str, request: "GeneratorRequest | None" = None):
        super().__init__(message)
        self.request = request


class AttackAborted(AttackError):
    """Raised mid-attack; ``trace`` holds the injections made before the failure."""

    def __init__(self, message: str, trace: "AttackTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class AttackConfig:
    budget: int = 50
    homophily_threshold: float = 0.35
    max_refine_iters: int = 5

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("attack budget must be >= 1")
        if not -1 < self.homophily_threshold < 1:
            raise ValueError("homophily threshold must lie in (-1, 1)")
        if self.max_refine_iters < 1:
            raise ValueError("max_refine_iters must be >= 1")


@dataclass(frozen=True)
class GeneratorRequest:
    system_prompt: str
    user_text: str
    feedback_similarity: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


class Generator(Protocol):
    def generate(self, request: GeneratorRequest) -> str: ...


class Victim(Protocol):
    def predict(self, tree: PropagationTree, features: np.ndarray) -> Prediction: ...


def refine_prompt(similarity: float) -> str:
    return REFINE_PROMPT.format(similarity=f"{similarity:.4f}")


def generate_message(generator: Generator, source_text: str, prior_message: str | None = None,
                     prior_similarity: float | None = None) -> str:
    """First call prompts with the source post; refinements feed back the prior message and its similarity."""
    if prior_message is None:
        request = GeneratorRequest(INITIAL_PROMPT, source_text, None)
    else:
        request = GeneratorRequest(refine_prompt(prior_similarity), prior_message, prior_similarity)
    try:
        text = generator.generate(request)
    except AttackError:
        raise
    except Exception as exc:
        raise AttackError(f"generator failed: {exc}", request) from exc
    if not isinstance(text, str) or not tokenize(text):
        raise AttackError("generator returned an empty message", request)
    return text


class BuiltinDissimilarGenerator:
    """Greedy offline stand-in for an LLM.

    Builds a ``length``-token sentence, each step appending the vocabulary token
    that minimises the cosine between the encoded partial sentence and the
    request text.  Ties are broken by a permutation of the vocabulary seeded from
    (seed, request text), so output is a pure function of its inputs.
    """

    def __init__(self, vocab: Sequence[str], encoder: EncoderConfig, length: int = 8, seed: int = 0):
        vocab = sorted(set(vocab))
        if not vocab:
            raise ValueError("generator vocabulary is empty")
        self.vocab = vocab
        self.encoder = encoder
        self.length = length
        self.seed = seed
        self._buckets = np.array([bucket(t, encoder.dim, encoder.vocab_seed) for t in vocab])

    def _tiebreak(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.permutation(len(self.vocab))

    def generate(self, request: GeneratorRequest) -> str:
        target = encode_message(self.encoder, request.user_text)
        order = self._tiebreak(request.user_text)
        buckets = self._buckets[order]
        counts = count_vector(self.encoder, [])
        words = []
        for _ in range(self.length):
            dots = counts @ target + target[buckets]
            sq = counts @ counts + 2.0 * counts[buckets] + 1.0
            cos = dots / np.sqrt(sq)
            best = int(np.argmin(cos))  # first minimum in tie-break order
            words.append(self.vocab[order[best]])
            counts[buckets[best]] += 1.0
        return " ".join(words)


class HTTPGenerator:
    """Client for an external generation service (POST {url}/generate)."""

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 2, backoff: float = 1.0):
        self.url = url.rstrip("/") + "/generate"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def generate(self, request: GeneratorRequest) -> str:
        import httpx

        body = {"system_prompt": request.system_prompt, "user_text": request.user_text,
                "feedback_similarity": request.feedback_similarity}
        last = None
        for attempt in range(self.retries + 1):
            try:
                resp = httpx.post(self.url, json=body, timeout=self.timeout)
                resp.raise_for_status()
                message = resp.json()["message"]
                if not isinstance(message, str):
                    raise ValueError("'message' is not a string")
                return message
            except (httpx.HTTPError, ValueError, KeyError) as exc:
                last = exc
                log.warning("generator request failed (attempt %d): %s", attempt + 1, exc)
                if attempt < self.retries:
                    time.sleep(self.backoff * (attempt + 1))
        raise AttackError(f"generator service failed after {self.retries + 1} attempts: {last}", request)


@dataclass
class Candidate:
    text: str
    similarity: float
    refinements: int
    threshold_miss: bool


def refine_until_dissimilar(generator: Generator, tree: PropagationTree, features: np.ndarray,
                            cfg: AttackConfig, encoder: EncoderConfig) -> Candidate:
    """Generate, then re-prompt while the candidate's cosine to the root exceeds the threshold.

    At most ``max_refine_iters`` generator calls; the last candidate is accepted either way.
    """
    source = tree.messages[0].text
    root = features[0]
    text, sim = None, None
    for call in range(cfg.max_refine_iters):
        text = generate_message(generator, source, text, sim)
        vec = encode_message(encoder, text)
        sim = pair_homophily(np.vstack([vec, root]), 0, 1)
        if sim <= cfg.homophily_threshold:
            return Candidate(text, sim, call, False)
    return Candidate(text, sim, cfg.max_refine_iters - 1, True)


def attachment_parent(tree: PropagationTree) -> int:
    return rank_by_influence(tree).order[0]


def inject(tree: PropagationTree, features: np.ndarray, text: str,
           encoder: EncoderConfig) -> tuple[PropagationTree, np.ndarray, int]:
    """Append ``text`` as a leaf under the most influential node. Returns (tree, features, parent)."""
    parent = attachment_parent(tree)
    vec = encode_message(encoder, text)
    return tree.with_message(text, parent, injected=True), np.vstack([features, vec]), parent


class Outcome(str, enum.Enum):
    FLIPPED = "flipped"
    BUDGET_EXHAUSTED = "budget_exhausted"
    ERROR = "error"


@dataclass
class InjectionRecord:
    step: int
    text: str
    refinements: int
    threshold_miss: bool
    similarity_to_root: float
    root_homophily_before: float | None
    root_homophily_after: float
    parent: int
    prob_rumor: float
    predicted: str


@dataclass
class AttackTrace:
    tree_index: int
    records: list[InjectionRecord] = field(default_factory=list)
    outcome: Outcome = Outcome.BUDGET_EXHAUSTED
    error: str | None = None

    @property
    def injections(self) -> int:
        return len(self.records)

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            lines.append(json.dumps({"tree": self.tree_index, "outcome": self.outcome.value, **asdict(r)},
                                    sort_keys=True))
        if not self.records:
            lines.append(json.dumps({"tree": self.tree_index, "outcome": self.outcome.value,
                                     "step": None, "error": self.error}, sort_keys=True))
        return "\n".join(lines)


def _safe_root_homophily(tree, features):
    return root_homophily(tree, features) if tree.n >= 2 else None


def attack_tree(victim: Victim, tree: PropagationTree, features: np.ndarray, cfg: AttackConfig,
                generator: Generator, encoder: EncoderConfig, tree_index: int = 0):
    """Inject messages until the victim predicts non-rumor or the budget is spent.

    Returns (perturbed tree, perturbed features, trace).  A generator or victim
    failure raises :class:`AttackAborted` carrying the partial trace.
    """
    trace = AttackTrace(tree_index)
    try:
        pred = victim.predict(tree, features)
        for step in range(cfg.budget):
            if pred.label == Label.NONRUMOR:
                trace.outcome = Outcome.FLIPPED
                return tree, features, trace
            before = _safe_root_homophily(tree, features)
            cand = refine_until_dissimilar(generator, tree, features, cfg, encoder)
            tree, features, parent = inject(tree, features, cand.text, encoder)
            pred = victim.predict(tree, features)
            trace.records.append(InjectionRecord(
                step, cand.text, cand.refinements, cand.threshold_miss, cand.similarity,
                before, root_homophily(tree, features), parent,
                float(pred.probs[Label.RUMOR]), pred.label.name.lower()))
    except Exception as exc:
        trace.outcome = Outcome.ERROR
        trace.error = f"{type(exc).__name__}: {exc}"
        raise AttackAborted(f"attack on tree {tree_index} aborted: {exc}", trace) from exc
    trace.outcome = Outcome.FLIPPED if pred.label == Label.NONRUMOR else Outcome.BUDGET_EXHAUSTED
    return tree, features, trace


def attack_corpus(victim: Victim, corpus: Sequence[tuple[PropagationTree, np.ndarray]],
                  cfg: AttackConfig, generator: Generator, encoder: EncoderConfig):
    """Attack every rumor tree; non-rumor trees pass through untouched.

    ``victim`` decides when to stop injecting (it may be a surrogate of the model
    later evaluated).  A failing tree keeps its clean form and an error trace.
    """
    out, traces = [], []
    for idx, (tree, feats) in enumerate(corpus):
        if tree.label != Label.RUMOR:
            out.append((tree, feats))
            continue
        try:
            new_tree, new_feats, trace = attack_tree(victim, tree, feats, cfg, generator, encoder, idx)
        except AttackAborted as exc:  # one tree must not abort the campaign
            log.error("%s", exc)
            new_tree, new_feats, trace = tree, feats, exc.trace
        out.append((new_tree, new_feats))
        traces.append(trace)
    return out, traces
