import numpy as np
import pytest
from hypothesis import strategies as st

from sincon.encode import EncoderConfig
from sincon.mpt import Label, PropagationTree

WORDS = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet"]


def random_tree(rng: np.random.Generator, n: int, label=Label.RUMOR) -> PropagationTree:
    edges = [(int(rng.integers(0, c)), c) for c in range(1, n)]
    texts = [" ".join(rng.choice(WORDS, size=rng.integers(1, 6))) for _ in range(n)]
    return PropagationTree.build(texts, edges, label)


def path_tree(n=3, label=Label.RUMOR):
    return PropagationTree.build([f"m{i}" for i in range(n)], [(i, i + 1) for i in range(n - 1)], label)


def star_tree(leaves=4, label=Label.RUMOR):
    return PropagationTree.build([f"m{i}" for i in range(leaves + 1)],
                                 [(0, i) for i in range(1, leaves + 1)], label)


@st.composite
def trees(draw, min_n=1, max_n=30):
    n = draw(st.integers(min_n, max_n))
    parents = [draw(st.integers(0, c - 1)) for c in range(1, n)]
    label = draw(st.sampled_from([Label.RUMOR, Label.NONRUMOR]))
    texts = [" ".join(draw(st.lists(st.sampled_from(WORDS), min_size=1, max_size=5))) for _ in range(n)]
    return PropagationTree.build(texts, list(zip(parents, range(1, n))), label)


@pytest.fixture
def enc():
    return EncoderConfig(dim=32, vocab_seed=0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
