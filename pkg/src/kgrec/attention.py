"""Per-user, per-relation interest gates and user representations.

A user's interest in relation m is tanh(relu(tau * num/den)): num is the
mean affinity of the user's block-m vector with the block-m representation
of their interacted items, den the same affinity against the all-items
mean block. The gate lives in [0, 1) and is deliberately not normalized
across relations. By linearity, the denominator needs only one dot product
against a cached mean block, refreshed once per epoch and at evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kgrec.embedding import AttributeLayout

DEN_EPS = 1e-8


@dataclass
class ItemBlockMeans:
    """Mean over all items of the final representation, with a refresh
    stamp so stale snapshots are detectable."""

    vec: np.ndarray = field(repr=False)
    stamp: int = 0


def item_block_means(item_reps: np.ndarray, stamp: int = 0) -> ItemBlockMeans:
    if item_reps.shape[0] == 0:
        raise ValueError("need at least one item to average over")
    return ItemBlockMeans(vec=item_reps.mean(axis=0), stamp=stamp)


@dataclass
class InterestProfile:
    """Gate values f(u, m) in [0, 1) for one user, plus the intermediates
    the backward pass needs."""

    scores: np.ndarray
    num: np.ndarray = field(repr=False)
    den: np.ndarray = field(repr=False)
    active: np.ndarray = field(repr=False)  # gate open: ratio > 0 and den valid
    tau: float = 1.0


def interest_profile(
    user_vec: np.ndarray,
    h_user: np.ndarray,
    means: ItemBlockMeans,
    layout: AttributeLayout,
    tau: float,
) -> InterestProfile:
    """Gates for every relation. ``h_user`` is the mean final representation
    of the user's interacted items (zeros for a cold user, giving all-zero
    gates)."""
    p = interest_profiles(user_vec[None, :], h_user[None, :], means, layout, tau)
    return InterestProfile(
        scores=p.scores[0], num=p.num[0], den=p.den[0], active=p.active[0], tau=tau
    )


def block_dots(a: np.ndarray, b: np.ndarray, layout: AttributeLayout) -> np.ndarray:
    """Per-block dot products along the last axis: (..., D) x (..., D) ->
    (..., n_relations)."""
    return np.add.reduceat(a * b, layout.offsets, axis=-1)


def interest_profiles(
    user_vecs: np.ndarray,
    h_users: np.ndarray,
    means: ItemBlockMeans,
    layout: AttributeLayout,
    tau: float,
) -> InterestProfile:
    """Vectorized gates for a stack of users: inputs (n, D), scores (n, M)."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    num = block_dots(user_vecs, h_users, layout)
    den = block_dots(user_vecs, np.broadcast_to(means.vec, user_vecs.shape), layout)
    active = (np.abs(den) >= DEN_EPS) & ~((den < 0) & (num > 0))
    ratio = np.where(active, num / np.where(active, den, 1.0), 0.0)
    active = active & (ratio > 0)
    scores = np.where(active, np.tanh(tau * np.where(active, ratio, 0.0)), 0.0)
    return InterestProfile(scores=scores, num=num, den=den, active=active, tau=tau)


def expand_gates(scores: np.ndarray, layout: AttributeLayout) -> np.ndarray:
    """Per-element gate vector: score m repeated over block m (last axis)."""
    return np.repeat(scores, layout.dims, axis=-1)


def user_rep_plain(user_vec: np.ndarray, h_user: np.ndarray) -> np.ndarray:
    """CF vector plus the plain mean of interacted-item representations."""
    return user_vec + h_user


def user_rep_attentive(
    user_vec: np.ndarray,
    h_user: np.ndarray,
    profile: InterestProfile,
    layout: AttributeLayout,
) -> np.ndarray:
    """CF vector plus the gate-scaled item mean, block by block. All gates
    zero gives the pure CF vector; all gates one recovers the plain form."""
    return user_vec + expand_gates(profile.scores, layout) * h_user


def score(u_rep: np.ndarray, i_rep: np.ndarray) -> float:
    if u_rep.shape != i_rep.shape:
        raise ValueError(f"shape mismatch {u_rep.shape} vs {i_rep.shape}")
    return float(u_rep @ i_rep)
