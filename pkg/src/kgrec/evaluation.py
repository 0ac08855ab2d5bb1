"""Full-ranking top-K evaluation: Recall@K and NDCG@K over test users.

Every item the user has not trained on is a candidate; training items are
excluded from the ranking. NDCG uses binary gains with a log2 discount and
the ideal DCG truncated at min(|test|, K). Macro averages run over users
with a nonempty test list. Score ties break toward the smaller item id so
rankings are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kgrec import attention
from kgrec.embedding import ParameterStore
from kgrec.kg import InteractionSet
from kgrec.propagation import Propagator


def rank_items(
    scores: np.ndarray, train_items: np.ndarray, k: int
) -> np.ndarray:
    """Top-k item ids by score descending, training items excluded,
    ties broken by ascending id. Returns fewer than k when the candidate
    pool is smaller."""
    if k < 1:
        raise ValueError("k must be >= 1")
    s = np.asarray(scores, dtype=np.float64).copy()
    s[np.asarray(train_items, dtype=np.int64)] = -np.inf
    order = np.lexsort((np.arange(len(s)), -s))
    order = order[np.isfinite(s[order])]
    return order[:k]


def recall_at_k(topk: np.ndarray, test_items: np.ndarray) -> float:
    if len(test_items) == 0:
        raise ValueError("test set must be nonempty")
    hits = np.isin(topk, test_items).sum()
    return float(hits) / len(test_items)


def ndcg_at_k(topk: np.ndarray, test_items: np.ndarray) -> float:
    if len(test_items) == 0:
        raise ValueError("test set must be nonempty")
    rel = np.isin(topk, test_items).astype(np.float64)
    discounts = 1.0 / np.log2(np.arange(2, len(topk) + 2))
    dcg = float((rel * discounts).sum())
    ideal_len = min(len(test_items), len(topk))
    idcg = float(discounts[:ideal_len].sum())
    return dcg / idcg if idcg > 0 else 0.0


@dataclass
class RankingResult:
    k: int
    recall: float
    ndcg: float
    n_users: int
    per_user: dict[int, tuple[float, float]] = field(default_factory=dict, repr=False)
    topk: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def user_representations(
    params: ParameterStore,
    item_reps: np.ndarray,
    inter: InteractionSet,
    users: np.ndarray,
    use_attention: bool,
    tau: float,
) -> np.ndarray:
    """Stacked user representations for the given users, using the current
    item representations for the interacted-item means and (if enabled) the
    interest gates."""
    width = params.user.shape[1]
    H = np.zeros((len(users), width))
    for k, u in enumerate(users):
        items = inter.train[u]
        if len(items):
            H[k] = item_reps[items].mean(axis=0)
    uvecs = params.user[users]
    if not use_attention:
        return uvecs + H
    means = attention.item_block_means(item_reps)
    profiles = attention.interest_profiles(uvecs, H, means, params.layout, tau)
    return uvecs + attention.expand_gates(profiles.scores, params.layout) * H


def evaluate(
    params: ParameterStore,
    propagator: Propagator,
    inter: InteractionSet,
    cfg,
    k: int = 20,
    keep_lists: bool = False,
) -> RankingResult:
    """Macro-averaged Recall@k / NDCG@k over users with test interactions."""
    e_star = propagator.entity_reps(params)
    item_reps = e_star[: inter.n_items]
    users = inter.test_users()
    u_reps = user_representations(
        params, item_reps, inter, users, cfg.attention, cfg.tau
    )
    recalls, ndcgs = [], []
    result = RankingResult(k=k, recall=0.0, ndcg=0.0, n_users=len(users))
    for row, u in enumerate(users):
        scores = item_reps @ u_reps[row]
        topk = rank_items(scores, inter.train[u], k)
        r = recall_at_k(topk, inter.test[u])
        n = ndcg_at_k(topk, inter.test[u])
        recalls.append(r)
        ndcgs.append(n)
        if keep_lists:
            result.per_user[int(u)] = (r, n)
            result.topk[int(u)] = topk
    result.recall = float(np.mean(recalls)) if recalls else 0.0
    result.ndcg = float(np.mean(ndcgs)) if ndcgs else 0.0
    return result
