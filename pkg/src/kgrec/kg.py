"""Knowledge graph and interaction data: loading, validation, indexing.

The KG is stored as a per-relation reverse-adjacency index: for every
(tail, relation) pair we keep the sorted list of head entities, i.e. the
neighbor set used by the aggregation layers. Inverse relations are
materialized at load time with id = canonical id + canonical count, so the
relation set always contains both directions.

File formats follow the released KGAT-style datasets:
  kg_final.txt   one `head relation tail` triple per line (decimal ids)
  train.txt/test.txt   `user item item ...` per line
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class KGLoadError(ValueError):
    """Raised on malformed or out-of-range input data."""


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """Immutable per-relation CSR index: (tail, relation) -> sorted heads.

    ``indptr[r]`` has length ``n_entities + 1``; heads of entity ``i`` under
    relation ``r`` are ``heads[r][indptr[r][i]:indptr[r][i + 1]]``.
    Relations ``[0, n_canonical)`` are the input directions, relation
    ``r + n_canonical`` is the inverse of ``r``.
    """

    n_entities: int
    n_canonical: int
    indptr: list[np.ndarray] = field(repr=False)
    heads: list[np.ndarray] = field(repr=False)

    @property
    def n_relations(self) -> int:
        return 2 * self.n_canonical

    @property
    def edge_counts(self) -> np.ndarray:
        return np.array([len(h) for h in self.heads], dtype=np.int64)

    @property
    def n_triples(self) -> int:
        """Total directed edge count (canonical + inverse)."""
        return int(sum(len(h) for h in self.heads))

    def inverse(self, r: int) -> int:
        return r + self.n_canonical if r < self.n_canonical else r - self.n_canonical

    def neighbors(self, i: int, r: int) -> np.ndarray:
        """Sorted head entities j with (j, r, i) in the graph; empty if absent."""
        if not (0 <= i < self.n_entities):
            raise IndexError(f"entity id {i} out of range [0, {self.n_entities})")
        if not (0 <= r < self.n_relations):
            raise IndexError(f"relation id {r} out of range [0, {self.n_relations})")
        lo, hi = self.indptr[r][i], self.indptr[r][i + 1]
        return self.heads[r][lo:hi]

    def degree(self, i: int, r: int) -> int:
        return int(self.indptr[r][i + 1] - self.indptr[r][i])


def build_graph(
    triples: np.ndarray, entity_count: int, canonical_relation_count: int
) -> KnowledgeGraph:
    """Index canonical (h, r, t) triples, materializing inverse relations.

    Duplicate triples are dropped so neighbor means are not double-weighted.
    """
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples):
        triples = np.unique(triples, axis=0)
    n_rel = 2 * canonical_relation_count
    # augment: (t, r + R, h) for every canonical (h, r, t)
    if len(triples):
        inv = np.stack(
            [
                triples[:, 2],
                triples[:, 1] + canonical_relation_count,
                triples[:, 0],
            ],
            axis=1,
        )
        all_t = np.concatenate([triples, inv], axis=0)
    else:
        all_t = triples
    indptr: list[np.ndarray] = []
    heads: list[np.ndarray] = []
    for r in range(n_rel):
        sel = all_t[all_t[:, 1] == r] if len(all_t) else all_t
        tails = sel[:, 2] if len(sel) else np.empty(0, dtype=np.int64)
        hs = sel[:, 0] if len(sel) else np.empty(0, dtype=np.int64)
        order = np.lexsort((hs, tails))
        tails, hs = tails[order], hs[order]
        ptr = np.zeros(entity_count + 1, dtype=np.int64)
        np.add.at(ptr, tails + 1, 1)
        np.cumsum(ptr, out=ptr)
        indptr.append(ptr)
        heads.append(np.ascontiguousarray(hs))
    return KnowledgeGraph(
        n_entities=entity_count,
        n_canonical=canonical_relation_count,
        indptr=indptr,
        heads=heads,
    )


def load_kg(path, entity_count: int, canonical_relation_count: int) -> KnowledgeGraph:
    """Load whitespace-separated `head relation tail` lines.

    Ids must be in range; relations in the file are canonical only, inverses
    are added here. Errors name the offending 1-based line number.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise KGLoadError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError as exc:
                raise KGLoadError(f"{path}:{lineno}: non-integer field") from exc
            if not (0 <= h < entity_count and 0 <= t < entity_count):
                raise KGLoadError(
                    f"{path}:{lineno}: entity id out of range [0, {entity_count})"
                )
            if not (0 <= r < canonical_relation_count):
                raise KGLoadError(
                    f"{path}:{lineno}: relation id out of range "
                    f"[0, {canonical_relation_count})"
                )
            rows.append((h, r, t))
    triples = np.array(rows, dtype=np.int64).reshape(-1, 3)
    g = build_graph(triples, entity_count, canonical_relation_count)
    log.info(
        "loaded %s: %d canonical triples, %d relations (%d with inverses)",
        path,
        len(triples),
        canonical_relation_count,
        g.n_relations,
    )
    return g


@dataclass
class InteractionSet:
    """Per-user sorted, deduplicated train/test item lists."""

    n_users: int
    n_items: int
    train: list[np.ndarray] = field(repr=False)
    test: list[np.ndarray] = field(repr=False)

    @property
    def n_train_interactions(self) -> int:
        return int(sum(len(t) for t in self.train))

    def train_pairs(self) -> np.ndarray:
        """All (user, item) train pairs as an (N, 2) array."""
        if self.n_train_interactions == 0:
            return np.empty((0, 2), dtype=np.int64)
        users = np.concatenate(
            [np.full(len(items), u, dtype=np.int64) for u, items in enumerate(self.train)]
        )
        items = np.concatenate(self.train)
        return np.stack([users, items], axis=1)

    def test_users(self) -> np.ndarray:
        return np.array(
            [u for u in range(self.n_users) if len(self.test[u])], dtype=np.int64
        )


def _read_user_lists(path, item_count: int | None) -> dict[int, np.ndarray]:
    out: dict[int, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                ids = [int(p) for p in parts]
            except ValueError as exc:
                raise KGLoadError(f"{path}:{lineno}: non-integer field") from exc
            user, items = ids[0], ids[1:]
            if user < 0 or any(i < 0 for i in items):
                raise KGLoadError(f"{path}:{lineno}: negative id")
            if item_count is not None and any(i >= item_count for i in items):
                raise KGLoadError(
                    f"{path}:{lineno}: item id out of range [0, {item_count})"
                )
            arr = np.unique(np.array(items, dtype=np.int64))
            if user in out:
                arr = np.unique(np.concatenate([out[user], arr]))
            out[user] = arr
    return out


def load_interactions(train_path, test_path, item_count: int | None = None) -> InteractionSet:
    """Load `user item item ...` lines; dedup + sort per user.

    Users that appear only in the test file get an empty train list and a
    warning. If ``item_count`` is None it is inferred from the data.
    """
    train_raw = _read_user_lists(train_path, item_count)
    test_raw = _read_user_lists(test_path, item_count)
    n_users = max(list(train_raw) + list(test_raw), default=-1) + 1
    if item_count is None:
        item_count = (
            max(
                (int(v.max()) for v in list(train_raw.values()) + list(test_raw.values()) if len(v)),
                default=-1,
            )
            + 1
        )
    empty = np.empty(0, dtype=np.int64)
    train = [train_raw.get(u, empty) for u in range(n_users)]
    test = [test_raw.get(u, empty) for u in range(n_users)]
    cold = [u for u in test_raw if u not in train_raw or not len(train_raw[u])]
    if cold:
        warnings.warn(
            f"{len(cold)} user(s) appear in the test set with no training "
            f"interactions (e.g. user {cold[0]})",
            stacklevel=2,
        )
    return InteractionSet(n_users=n_users, n_items=item_count, train=train, test=test)
