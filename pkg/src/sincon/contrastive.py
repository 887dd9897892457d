"""Influence-ranked masking views and the contrastive regulariser built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .detector import (ModelParams, TreeBatch, batch_forward, cross_entropy, forward,
                       masked_features)
from .mpt import DegenerateInputError, InfluenceRanking, PropagationTree

MASK_FRACTION = 0.10


def mask_size(n: int) -> int:
    return max(1, math.ceil(MASK_FRACTION * n - 1e-12))


@dataclass(frozen=True)
class AugmentedViews:
    tree: PropagationTree
    features: np.ndarray
    imp_mask: frozenset[int]
    ump_mask: frozenset[int]
    imp_features: np.ndarray
    ump_features: np.ndarray


def _build(tree, features, imp, ump) -> AugmentedViews:
    imp, ump = frozenset(imp), frozenset(ump)
    if imp & ump:
        raise DegenerateInputError(f"masks overlap on {sorted(imp & ump)}")
    return AugmentedViews(tree, features, imp, ump,
                          masked_features(features, imp), masked_features(features, ump))


def _check_size(tree: PropagationTree) -> int:
    k = mask_size(tree.n)
    if tree.n < 2 * k + 1:
        raise DegenerateInputError(f"tree of {tree.n} nodes cannot hold two disjoint masks of {k}")
    return k


def make_views(tree: PropagationTree, features: np.ndarray, ranking: InfluenceRanking) -> AugmentedViews:
    """Mask the top-k (important) and bottom-k (unimportant) non-root nodes by influence."""
    k = _check_size(tree)
    order = [i for i in ranking.order if i != 0]
    return _build(tree, features, order[:k], order[::-1][:k])


def make_random_views(tree: PropagationTree, features: np.ndarray, seed: int) -> AugmentedViews:
    k = _check_size(tree)
    picked = np.random.default_rng(seed).choice(np.arange(1, tree.n), size=2 * k, replace=False)
    return _build(tree, features, picked[:k].tolist(), picked[k:].tolist())


def sim_kernel(r_i, r_j, tau: float) -> float:
    """exp(cos(r_i, r_j) / tau)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    r_i, r_j = np.asarray(r_i, dtype=np.float64), np.asarray(r_j, dtype=np.float64)
    ni, nj = np.linalg.norm(r_i), np.linalg.norm(r_j)
    if ni == 0 or nj == 0:
        raise ValueError("similarity of a zero vector is undefined")
    return math.exp(float(r_i @ r_j) / (ni * nj) / tau)


@dataclass(frozen=True)
class SinconBatchLoss:
    positive: np.ndarray
    negative: np.ndarray
    per_example: np.ndarray
    mean: float


# Added under the square root while training; a view whose ReLUs all die
# would otherwise have an undefined cosine and abort the run.
NORM_EPS = 1e-16


def _unit_rows(s: ad.Tensor, eps: float) -> ad.Tensor:
    sq = ad.sum(s * s, axis=1, keepdims=True)
    if eps == 0 and np.any(sq.value == 0):
        raise ValueError("zero summary vector in contrastive loss")
    return s / ad.sqrt(sq + eps) if eps else s / ad.sqrt(sq)


def sincon_terms(s: ad.Tensor, s_imp: ad.Tensor, s_ump: ad.Tensor, tau: float, eps: float = 0.0):
    """Positive sums, negative sums and per-example losses as tensors.

    For example i, the positive sum pairs the two masked views with each other
    and with the original; the negative sum runs over the batch, taking the
    original-original kernel for every j and the original-view kernels only for j != i.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    u, ui, uu = (_unit_rows(x, eps) for x in (s, s_imp, s_ump))
    b = s.shape[0]
    eye = np.eye(b)
    inv_tau = 1.0 / tau
    k_oo = ad.exp((u @ u.T) * inv_tau)
    k_ou = ad.exp((u @ uu.T) * inv_tau)
    k_oi = ad.exp((u @ ui.T) * inv_tau)
    k_iu = ad.exp(ad.sum(ui * uu, axis=1) * inv_tau)
    positive = k_iu + ad.sum(k_ou * eye, axis=1) + ad.sum(k_oi * eye, axis=1)
    negative = ad.sum(k_oo, axis=1) + ad.sum((k_ou + k_oi) * (1.0 - eye), axis=1)
    per_example = ad.log(negative) - ad.log(positive)
    return positive, negative, per_example


def sincon_loss(summaries: Sequence[tuple], tau: float) -> SinconBatchLoss:
    """Contrastive loss for a batch of (s, s_imp, s_ump) summary triples."""
    if not summaries:
        raise ValueError("empty batch")
    cols = [ad.Tensor(np.vstack([np.asarray(t[c], dtype=np.float64) for t in summaries]), op="const")
            for c in range(3)]
    pos, neg, per = sincon_terms(*cols, tau)
    return SinconBatchLoss(pos.value, neg.value, per.value, float(per.value.mean()))


def total_loss_terms(w: dict[str, ad.Tensor], params: ModelParams, views: Sequence[AugmentedViews],
                     tau: float, alpha1: float, alpha2: float):
    """Supervised loss on the originals plus weighted view losses and the contrastive term.

    Returns the total as a tensor and a dict of the component values.
    """
    trees = [v.tree for v in views]
    orig = TreeBatch(trees, [v.features for v in views])
    imp = TreeBatch(trees, [v.imp_features for v in views])
    ump = TreeBatch(trees, [v.ump_features for v in views])
    labels = orig.labels
    s, logits = batch_forward(w, params, orig)
    s_imp, logits_imp = batch_forward(w, params, imp)
    s_ump, logits_ump = batch_forward(w, params, ump)
    sup = cross_entropy(logits, labels)
    sup_imp = cross_entropy(logits_imp, labels)
    sup_ump = cross_entropy(logits_ump, labels)
    _, _, per = sincon_terms(s, s_imp, s_ump, tau, NORM_EPS)
    con = ad.mean(per)
    total = sup + alpha1 * (sup_imp + sup_ump) + alpha2 * con
    parts = {"sup": float(sup.value), "sup_imp": float(sup_imp.value),
             "sup_ump": float(sup_ump.value), "sincon": float(con.value)}
    return total, parts


def total_loss(params: ModelParams, views: Sequence[AugmentedViews], tau: float,
               alpha1: float, alpha2: float) -> float:
    w = {k: ad.Tensor(v, op="const") for k, v in params.weights.items()}
    return float(total_loss_terms(w, params, views, tau, alpha1, alpha2)[0].value)


def influence_gap(params: ModelParams, views: AugmentedViews) -> float:
    """L1 distance between predicted distributions of the two masked views."""
    p_imp = forward(params, views.tree, views.imp_features).probs
    p_ump = forward(params, views.tree, views.ump_features).probs
    return float(np.abs(p_ump - p_imp).sum())
