import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import path_tree, random_tree, trees
from oracles import central_differences, contrastive_loss_bruteforce, relative_error
from sincon import autodiff as ad
from sincon.contrastive import (AugmentedViews, influence_gap, make_random_views, make_views,
                                mask_size, sim_kernel, sincon_loss, total_loss, total_loss_terms)
from sincon.detector import TreeBatch, gradients, init_params, supervised_loss
from sincon.encode import encode_tree
from sincon.mpt import DegenerateInputError, InfluenceRanking, Label, rank_by_influence


@pytest.mark.parametrize("n,k", [(3, 1), (10, 1), (11, 2), (25, 3), (40, 4)])
def test_mask_size(n, k):
    assert mask_size(n) == k


class TestViews:
    def test_path_example(self, enc):
        t = path_tree(3)
        ranking = InfluenceRanking(np.zeros(3), (1, 0, 2))
        v = make_views(t, encode_tree(enc, t), ranking)
        assert v.imp_mask == {1} and v.ump_mask == {2}
        assert np.all(v.imp_features[1] == 0) and np.all(v.ump_features[2] == 0)
        assert np.array_equal(v.imp_features[[0, 2]], v.features[[0, 2]])

    def test_too_small(self, enc):
        t = path_tree(2)
        with pytest.raises(DegenerateInputError):
            make_views(t, encode_tree(enc, t), rank_by_influence(t))
        with pytest.raises(DegenerateInputError):
            make_random_views(t, encode_tree(enc, t), 0)

    @settings(max_examples=50, deadline=None)
    @given(trees(min_n=3, max_n=40))
    def test_influence_masks(self, t):
        f = np.ones((t.n, 2))
        r = rank_by_influence(t)
        v = make_views(t, f, r)
        k = mask_size(t.n)
        assert len(v.imp_mask) == len(v.ump_mask) == k
        assert 0 not in v.imp_mask | v.ump_mask
        assert not v.imp_mask & v.ump_mask
        non_root = [i for i in r.order if i != 0]
        assert min(r.scores[i] for i in v.imp_mask) >= max(r.scores[i] for i in v.ump_mask)
        assert v.imp_mask == set(non_root[:k])

    @settings(max_examples=50, deadline=None)
    @given(trees(min_n=3, max_n=40), st.integers(0, 2**31 - 1))
    def test_random_masks(self, t, seed):
        f = np.ones((t.n, 2))
        v = make_random_views(t, f, seed)
        w = make_random_views(t, f, seed)
        assert v.imp_mask == w.imp_mask and v.ump_mask == w.ump_mask
        assert len(v.imp_mask) == len(v.ump_mask) == mask_size(t.n)
        assert 0 not in v.imp_mask | v.ump_mask and not v.imp_mask & v.ump_mask

    def test_random_n10(self, enc):
        t = random_tree(np.random.default_rng(0), 10)
        v = make_random_views(t, encode_tree(enc, t), 5)
        assert len(v.imp_mask) == 1 and len(v.ump_mask) == 1


class TestKernel:
    def test_identical_tau1(self):
        assert sim_kernel([1.0, 2.0], [1.0, 2.0], 1.0) == pytest.approx(math.e)

    def test_orthogonal(self):
        assert sim_kernel([1.0, 0.0], [0.0, 3.0], 0.5) == 1.0

    def test_identical_tau_half(self):
        assert sim_kernel([3.0, 4.0], [3.0, 4.0], 0.5) == pytest.approx(math.e ** 2)

    @pytest.mark.parametrize("args", [([1.0], [1.0], 0.0), ([1.0], [1.0], -1.0), ([0.0, 0.0], [1.0, 0.0], 1.0)])
    def test_bad_arguments(self, args):
        with pytest.raises(ValueError):
            sim_kernel(*args)


class TestSinconLoss:
    @pytest.mark.parametrize("tau", [0.1, 0.5, 2.0])
    def test_single_identical(self, tau):
        s = np.array([0.2, 0.5, 0.1])
        out = sincon_loss([(s, s, s)], tau)
        assert out.mean == pytest.approx(-math.log(3), abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 8), st.floats(0.1, 2.0), st.integers(0, 10**6))
    def test_matches_bruteforce(self, b, d, tau, seed):
        rng = np.random.default_rng(seed)
        triples = [tuple(rng.normal(size=d) + 0.01 for _ in range(3)) for _ in range(b)]
        triples = [tuple(x if np.linalg.norm(x) > 1e-3 else x + 1 for x in t) for t in triples]
        out = sincon_loss(triples, tau)
        ref = contrastive_loss_bruteforce(triples, tau)
        np.testing.assert_allclose(out.per_example, ref, rtol=0, atol=1e-9)
        assert out.mean == pytest.approx(np.mean(ref), abs=1e-9)
        assert np.all(out.positive > 0) and np.all(out.negative > 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10**6))
    def test_rescaling_invariance(self, b, seed):
        rng = np.random.default_rng(seed)
        triples = [tuple(rng.uniform(0.1, 1.0, size=5) for _ in range(3)) for _ in range(b)]
        scaled = [tuple(3 * x for x in t) for t in triples]
        per_vec = [tuple(rng.uniform(0.1, 10) * x for x in t) for t in triples]
        a = sincon_loss(triples, 0.5).mean
        assert sincon_loss(scaled, 0.5).mean == pytest.approx(a, abs=1e-12)
        assert sincon_loss(per_vec, 0.5).mean == pytest.approx(a, abs=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            sincon_loss([(np.zeros(3), np.ones(3), np.ones(3))], 0.5)


def _views(enc, seed=0, b=2, lo=3, hi=9):
    rng = np.random.default_rng(seed)
    ts = [random_tree(rng, int(rng.integers(lo, hi)), Label(i % 2)) for i in range(b)]
    return [make_views(t, encode_tree(enc, t), rank_by_influence(t)) for t in ts]


class TestTotalLoss:
    def test_zero_alphas_equal_supervised(self, enc):
        views = _views(enc, b=3)
        params = init_params(enc.dim, (8,), 1, scale=0.5)
        batch = TreeBatch([v.tree for v in views], [v.features for v in views])
        assert total_loss(params, views, 0.5, 0.0, 0.0) == supervised_loss(params, batch)

    def test_alpha1_only_sums_three(self, enc):
        views = _views(enc, b=3)
        params = init_params(enc.dim, (8,), 1, scale=0.5)
        trees = [v.tree for v in views]
        parts = [supervised_loss(params, TreeBatch(trees, [getattr(v, a) for v in views]))
                 for a in ("features", "imp_features", "ump_features")]
        assert total_loss(params, views, 0.5, 1.0, 0.0) == pytest.approx(sum(parts), rel=1e-14)

    def test_composition(self, enc):
        views = _views(enc, seed=3, b=4)
        params = init_params(enc.dim, (8,), 2, scale=0.5)
        trees = [v.tree for v in views]
        from sincon.detector import predict_batch
        sup = [supervised_loss(params, TreeBatch(trees, [getattr(v, a) for v in views]))
               for a in ("features", "imp_features", "ump_features")]
        summ = [[p.summary for p in predict_batch(params, TreeBatch(trees, [getattr(v, a) for v in views]))]
                for a in ("features", "imp_features", "ump_features")]
        con = np.mean(contrastive_loss_bruteforce(list(zip(*summ)), 0.5))
        expected = sup[0] + 0.3 * (sup[1] + sup[2]) + 0.7 * con
        assert total_loss(params, views, 0.5, 0.3, 0.7) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("variant", ["gcn", "bigcn"])
    def test_gradients_match_finite_differences(self, enc, variant):
        views = _views(enc, seed=5)
        params = init_params(enc.dim, (6, 4), 0, variant, scale=0.5)

        def closure(w):
            return total_loss_terms(w, params, views, 0.5, 0.3, 0.8)[0]

        _, analytic = gradients(params, closure)
        numeric = central_differences(
            lambda p: float(closure({k: ad.Tensor(v, op="const") for k, v in p.items()}).value),
            params.weights)
        assert relative_error(analytic, numeric) < 1e-4


class TestInfluenceGap:
    def test_identical_views_zero(self, enc):
        t = random_tree(np.random.default_rng(0), 6)
        f = encode_tree(enc, t)
        g = f.copy()
        g[3] = 0
        v = AugmentedViews(t, f, frozenset({3}), frozenset({3}), g, g)
        assert influence_gap(init_params(enc.dim, (4,), 0), v) == 0.0

    @settings(max_examples=20, deadline=None)
    @given(trees(min_n=3, max_n=20), st.integers(0, 100))
    def test_bounded(self, t, seed):
        from sincon.encode import EncoderConfig
        enc = EncoderConfig(16, 0)
        v = make_views(t, encode_tree(enc, t), rank_by_influence(t))
        gap = influence_gap(init_params(16, (8,), seed, scale=5.0), v)
        assert 0.0 <= gap <= 2.0
