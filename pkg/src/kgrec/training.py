"""Pairwise ranking training: sampling, loss, analytic gradients, sparse Adam.

The objective per sampled (user, pos, neg) triple is -ln sigmoid(y+ - y-)
(computed stably via softplus) plus L2 on the parameters touched by the
batch. Gradients are derived by hand: the propagation stack is linear, so
its backward is a transpose transport; the only nonlinearities are the
pairwise sigmoid and the tanh(relu(.)) interest gate. The cached all-items
mean block used in the gate denominator is treated as a constant input, so
gradients are exact for the function actually evaluated.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from kgrec import attention
from kgrec.embedding import (
    AttributeLayout,
    DimensionSchedule,
    ParameterStore,
    build_layout,
    compute_dims,
    init_params,
)
from kgrec.kg import InteractionSet, KnowledgeGraph
from kgrec.propagation import COMBINE_MODES, Propagator

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericError(RuntimeError):
    """Raised when a step produces non-finite gradients or parameters."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    l2: float = 1e-5
    tau: float = 0.1
    n_layers: int = 2
    batch_size: int = 1024
    node_dropout: float = 0.0
    patience: int = 10
    max_epochs: int = 1000
    seed: int = 0
    combine: str = "concat"
    attention: bool = True
    d_min: int = 4
    d_max: int = 64
    c: int = 5000
    l2_scope: str = "batch"  # "batch" or "full"
    eval_k: int = 20

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if not (0.0 <= self.node_dropout < 1.0):
            raise ValueError("node_dropout must be in [0, 1)")
        if self.combine not in COMBINE_MODES:
            raise ValueError(f"combine must be one of {COMBINE_MODES}")
        if self.attention and self.combine != "concat":
            raise ValueError("the interest gate requires concat combination")
        if self.l2_scope not in ("batch", "full"):
            raise ValueError("l2_scope must be 'batch' or 'full'")
        if self.n_layers not in (1, 2, 3):
            warnings.warn(f"n_layers={self.n_layers} is outside the usual range 1-3")

    @property
    def schedule(self) -> DimensionSchedule:
        return DimensionSchedule(self.d_min, self.d_max, self.c)


def build_layout_for(cfg: TrainConfig, graph: KnowledgeGraph) -> AttributeLayout:
    """Concat mode sizes blocks from per-direction edge counts; the
    elementwise ablations need one uniform width and use d_max."""
    if cfg.combine == "concat":
        dims = compute_dims(graph.edge_counts, cfg.schedule)
    else:
        dims = np.full(graph.n_relations, cfg.d_max, dtype=np.int64)
    return build_layout(dims)


@dataclass
class Batch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


def sample_batch(
    inter: InteractionSet, batch_size: int, rng: np.random.Generator
) -> Batch:
    """Uniform positives from the train pairs; one uniform rejection-sampled
    negative per positive. Users who interacted with every item are skipped."""
    pairs = inter.train_pairs()
    if len(pairs) == 0:
        raise ValueError("train set is empty")
    idx = rng.integers(0, len(pairs), size=batch_size)
    users, pos, neg = [], [], []
    for u, i in pairs[idx]:
        train_u = inter.train[u]
        if len(train_u) >= inter.n_items:
            warnings.warn(f"user {u} interacted with every item; skipped")
            continue
        while True:
            j = int(rng.integers(0, inter.n_items))
            k = np.searchsorted(train_u, j)
            if k >= len(train_u) or train_u[k] != j:
                break
        users.append(u)
        pos.append(i)
        neg.append(j)
    return Batch(
        users=np.array(users, dtype=np.int64),
        pos=np.array(pos, dtype=np.int64),
        neg=np.array(neg, dtype=np.int64),
    )


def node_dropout_mask(
    n_entities: int, ratio: float, rng: np.random.Generator
) -> np.ndarray | None:
    """Boolean keep mask; None at ratio 0 so the unmasked view is reused."""
    if ratio == 0.0:
        return None
    return rng.random(n_entities) >= ratio


@dataclass
class Gradients:
    """Sparse row-keyed accumulators for one batch."""

    user_rows: np.ndarray
    user: np.ndarray = field(repr=False)
    entity_rows: list[np.ndarray] = field(repr=False)
    entity: list[np.ndarray] = field(repr=False)

    def all_finite(self) -> bool:
        return bool(np.isfinite(self.user).all()) and all(
            np.isfinite(g).all() for g in self.entity
        )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _user_forward(
    params: ParameterStore,
    e_star: np.ndarray,
    inter: InteractionSet,
    users: np.ndarray,
    means: attention.ItemBlockMeans | None,
    cfg: TrainConfig,
):
    """Representations for a set of distinct users; returns (H, profiles,
    u_reps) where H holds the per-user interacted-item means."""
    width = e_star.shape[1]
    H = np.zeros((len(users), width))
    for k, u in enumerate(users):
        items = inter.train[u]
        if len(items):
            H[k] = e_star[items].mean(axis=0)
    uvecs = params.user[users]
    if cfg.attention:
        profiles = attention.interest_profiles(uvecs, H, means, params.layout, cfg.tau)
        gates = attention.expand_gates(profiles.scores, params.layout)
        u_reps = uvecs + gates * H
    else:
        profiles = None
        u_reps = uvecs + H
    return H, profiles, u_reps


def bpr_loss(
    params: ParameterStore,
    propagator: Propagator,
    inter: InteractionSet,
    batch: Batch,
    means: attention.ItemBlockMeans | None,
    cfg: TrainConfig,
) -> float:
    loss, _ = bpr_loss_and_grads(
        params, propagator, inter, batch, means, cfg, want_grads=False
    )
    return loss


def bpr_loss_and_grads(
    params: ParameterStore,
    propagator: Propagator,
    inter: InteractionSet,
    batch: Batch,
    means: attention.ItemBlockMeans | None,
    cfg: TrainConfig,
    want_grads: bool = True,
) -> tuple[float, Gradients | None]:
    """Batch objective and its exact gradient w.r.t. every touched row."""
    layout = params.layout
    e_star = propagator.entity_reps(params)
    users, inv = np.unique(batch.users, return_inverse=True)
    H, profiles, u_reps = _user_forward(params, e_star, inter, users, means, cfg)

    y_pos = np.einsum("ij,ij->i", u_reps[inv], e_star[batch.pos])
    y_neg = np.einsum("ij,ij->i", u_reps[inv], e_star[batch.neg])
    diff = y_pos - y_neg
    pair_loss = _softplus(-diff).sum()

    # rows the batch can reach, for the L2 scope and update sparsity
    indicator = np.zeros(params.n_entities, dtype=bool)
    indicator[batch.pos] = True
    indicator[batch.neg] = True
    for u in users:
        indicator[inter.train[u]] = True
    touched_entity = propagator.touched_rows(indicator)

    reg = 0.0
    if cfg.l2 > 0:
        if cfg.l2_scope == "full":
            reg = cfg.l2 * params.squared_norm()
        else:
            reg = cfg.l2 * float((params.user[users] ** 2).sum())
            for m, rows in enumerate(touched_entity):
                reg += cfg.l2 * float((params.entity[m][rows] ** 2).sum())
    loss = float(pair_loss + reg)
    if not want_grads:
        return loss, None

    s = 1.0 / (1.0 + np.exp(np.clip(diff, -500, 500)))  # sigmoid(-diff)
    d_estar = np.zeros_like(e_star)
    np.add.at(d_estar, batch.pos, -s[:, None] * u_reps[inv])
    np.add.at(d_estar, batch.neg, s[:, None] * u_reps[inv])
    # dL/d u_rep, accumulated over the user's triples
    g_urep = np.zeros_like(u_reps)
    np.add.at(g_urep, inv, -s[:, None] * e_star[batch.pos] + s[:, None] * e_star[batch.neg])

    d_user = np.zeros_like(u_reps)
    if cfg.attention:
        gates = attention.expand_gates(profiles.scores, layout)
        d_user += g_urep  # direct CF term
        dH = gates * g_urep  # gate product, gate held
        # through the gate value: dL/da_m = block-dot of g_urep with H
        da = attention.block_dots(g_urep, H, layout)
        sech2 = 1.0 - profiles.scores**2
        act = profiles.active
        safe_den = np.where(act, profiles.den, 1.0)
        dnum = np.where(act, da * sech2 * cfg.tau / safe_den, 0.0)
        dden = np.where(
            act, -da * sech2 * cfg.tau * profiles.num / (safe_den**2), 0.0
        )
        d_user += attention.expand_gates(dnum, layout) * H
        d_user += attention.expand_gates(dden, layout) * np.broadcast_to(
            means.vec, d_user.shape
        )
        dH += attention.expand_gates(dnum, layout) * params.user[users]
    else:
        d_user += g_urep
        dH = g_urep
    for k, u in enumerate(users):
        items = inter.train[u]
        if len(items):
            d_estar[items] += dH[k] / len(items)

    entity_dense = propagator.backward(d_estar)
    if cfg.l2 > 0:
        scale = 2.0 * cfg.l2
        d_user += scale * params.user[users]
        if cfg.l2_scope == "full":
            # full-theta regularization touches every row
            touched_entity = [np.arange(params.n_entities)] * layout.n_relations
            for m in range(layout.n_relations):
                entity_dense[m] += scale * params.entity[m]
        else:
            for m, rows in enumerate(touched_entity):
                entity_dense[m][rows] += scale * params.entity[m][rows]
    grads = Gradients(
        user_rows=users,
        user=d_user,
        entity_rows=touched_entity,
        entity=[entity_dense[m][rows] for m, rows in enumerate(touched_entity)],
    )
    return loss, grads


class AdamState:
    """Per-row moments and step counts, lazily meaningful: untouched rows
    keep zero moments and step 0, so bias correction stays exact."""

    def __init__(self, params: ParameterStore):
        self.user_m = np.zeros_like(params.user)
        self.user_v = np.zeros_like(params.user)
        self.user_t = np.zeros(params.n_users, dtype=np.int64)
        self.entity_m = [np.zeros_like(t) for t in params.entity]
        self.entity_v = [np.zeros_like(t) for t in params.entity]
        self.entity_t = [
            np.zeros(t.shape[0], dtype=np.int64) for t in params.entity
        ]


def _adam_rows(param, m, v, t, rows, g, lr):
    t[rows] += 1
    m[rows] = ADAM_BETA1 * m[rows] + (1 - ADAM_BETA1) * g
    v[rows] = ADAM_BETA2 * v[rows] + (1 - ADAM_BETA2) * g * g
    tr = t[rows][:, None].astype(np.float64)
    mhat = m[rows] / (1 - ADAM_BETA1**tr)
    vhat = v[rows] / (1 - ADAM_BETA2**tr)
    param[rows] -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def adam_step(
    params: ParameterStore, grads: Gradients, state: AdamState, lr: float
) -> None:
    """Sparse Adam: only rows present in the accumulators move."""
    if not grads.all_finite():
        raise NumericError("non-finite gradient; step aborted")
    _adam_rows(params.user, state.user_m, state.user_v, state.user_t,
               grads.user_rows, grads.user, lr)
    for m in range(len(params.entity)):
        rows = grads.entity_rows[m]
        if len(rows):
            _adam_rows(params.entity[m], state.entity_m[m], state.entity_v[m],
                       state.entity_t[m], rows, grads.entity[m], lr)


@dataclass
class EpochStats:
    epoch: int
    loss: float
    recall: float
    ndcg: float
    seconds: float


@dataclass
class TrainResult:
    params: ParameterStore  # best checkpoint by Recall@K
    final_params: ParameterStore
    history: list[EpochStats]
    best_epoch: int


def train(
    cfg: TrainConfig,
    graph: KnowledgeGraph,
    inter: InteractionSet,
    params: ParameterStore | None = None,
    on_epoch=None,
) -> TrainResult:
    """Epoch loop: dropout view, means refresh, sample/forward/backward/Adam,
    per-epoch evaluation, early stop when Recall@K stalls for `patience`
    epochs. ``on_epoch`` (if given) receives each EpochStats as it is made."""
    from kgrec.evaluation import evaluate

    layout = build_layout_for(cfg, graph)
    if params is None:
        params = init_params(
            layout,
            graph.n_entities,
            inter.n_users,
            cfg.seed,
            user_width=None if cfg.combine == "concat" else cfg.d_max,
        )
    rng = np.random.default_rng(cfg.seed)
    eval_prop = Propagator(graph, layout, cfg.n_layers, cfg.combine)
    n_batches = max(1, inter.n_train_interactions // cfg.batch_size)
    state = AdamState(params)
    history: list[EpochStats] = []
    best = params.copy()
    best_recall, best_epoch, since_best = -np.inf, -1, 0

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        keep = node_dropout_mask(graph.n_entities, cfg.node_dropout, rng)
        prop = (
            eval_prop
            if keep is None
            else Propagator(graph, layout, cfg.n_layers, cfg.combine, keep)
        )
        means = None
        if cfg.attention:
            reps = prop.entity_reps(params)
            means = attention.item_block_means(reps[: inter.n_items], stamp=epoch)
        total = 0.0
        for _ in range(n_batches):
            batch = sample_batch(inter, cfg.batch_size, rng)
            loss, grads = bpr_loss_and_grads(params, prop, inter, batch, means, cfg)
            adam_step(params, grads, state, cfg.learning_rate)
            total += loss / max(len(batch), 1)
        if not params.all_finite():
            raise NumericError(f"non-finite parameters after epoch {epoch}")
        result = evaluate(params, eval_prop, inter, cfg, k=cfg.eval_k)
        stats = EpochStats(
            epoch=epoch,
            loss=total / n_batches,
            recall=result.recall,
            ndcg=result.ndcg,
            seconds=time.perf_counter() - t0,
        )
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        log.info(
            "epoch %d loss %.6f recall@%d %.4f ndcg@%d %.4f (%.2fs)",
            epoch, stats.loss, cfg.eval_k, stats.recall, cfg.eval_k,
            stats.ndcg, stats.seconds,
        )
        if result.recall > best_recall:
            best_recall, best_epoch, since_best = result.recall, epoch, 0
            best = params.copy()
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return TrainResult(
        params=best, final_params=params, history=history, best_epoch=best_epoch
    )
