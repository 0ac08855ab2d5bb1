"""Planted-preference synthetic worlds for desk-scale experiments.

Each relation gets a pool of attribute entities and every item links to one
entity per relation. Every user secretly prefers a sparse subset of the
relations, with one target entity per preferred relation; interactions are
drawn without replacement with probability proportional to how many of the
user's (relation, target) pairs an item matches. The answer key recording
each user's preferred relations is the ground truth for interest-score
recovery experiments.

Optionally a second-hop relation hangs category entities off the first
relation's attribute pool, so that some attribute only appears two hops
from items.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 500
    n_items: int = 300
    n_relations: int = 8
    entities_per_relation: int = 10
    preference_sparsity: float = 0.125  # fraction of relations a user cares about
    interactions_per_user: int = 20
    seed: int = 0
    test_fraction: float = 0.25
    second_hop: bool = False
    second_hop_entities: int = 4

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_relations,
               self.entities_per_relation, self.interactions_per_user) < 1:
            raise ValueError("all counts must be positive")
        if not (0.0 < self.preference_sparsity <= 1.0):
            raise ValueError("preference_sparsity must be in (0, 1]")
        if not (0.0 < self.test_fraction < 1.0):
            raise ValueError("test_fraction must be in (0, 1)")


@dataclass
class SyntheticWorld:
    spec: SyntheticSpec
    n_entities: int
    n_canonical: int
    bridge_relation: int | None  # id of the second-hop relation, if any
    triples: np.ndarray  # (n, 3) canonical head relation tail
    train: dict[int, np.ndarray]
    test: dict[int, np.ndarray]
    preferred_relations: dict[int, list[int]]
    preferred_entities: dict[int, dict[int, int]]


def generate(spec: SyntheticSpec) -> SyntheticWorld:
    rng = np.random.default_rng(spec.seed)
    n_pref = max(1, int(round(spec.preference_sparsity * spec.n_relations)))
    # entity id map: items first, then one pool per relation, then categories
    pool_start = [
        spec.n_items + m * spec.entities_per_relation for m in range(spec.n_relations)
    ]
    n_entities = spec.n_items + spec.n_relations * spec.entities_per_relation
    n_canonical = spec.n_relations
    bridge = None
    triples = []

    # item attribute assignment: item i has entity attr[i, m] under relation m.
    # Balanced per relation so every pool entity tags ~n_items/pool items,
    # keeping the interaction sampling feasible for any target choice.
    base = np.resize(np.arange(spec.entities_per_relation), spec.n_items)
    attr = np.stack(
        [rng.permutation(base) for _ in range(spec.n_relations)], axis=1
    )
    for i in range(spec.n_items):
        for m in range(spec.n_relations):
            triples.append((pool_start[m] + attr[i, m], m, i))

    if spec.second_hop:
        bridge = n_canonical
        n_canonical += 1
        cat_start = n_entities
        n_entities += spec.second_hop_entities
        cats = rng.integers(0, spec.second_hop_entities, size=spec.entities_per_relation)
        for e in range(spec.entities_per_relation):
            triples.append((cat_start + cats[e], bridge, pool_start[0] + e))

    preferred_relations: dict[int, list[int]] = {}
    preferred_entities: dict[int, dict[int, int]] = {}
    train: dict[int, np.ndarray] = {}
    test: dict[int, np.ndarray] = {}
    n_test = max(1, int(round(spec.test_fraction * spec.interactions_per_user)))
    if n_test >= spec.interactions_per_user:
        raise ValueError("test_fraction leaves no training interactions")
    for u in range(spec.n_users):
        rels = sorted(rng.choice(spec.n_relations, size=n_pref, replace=False).tolist())
        targets = {m: int(rng.integers(0, spec.entities_per_relation)) for m in rels}
        weights = np.zeros(spec.n_items)
        for m in rels:
            weights += attr[:, m] == targets[m]
        candidates = np.flatnonzero(weights)
        if len(candidates) < spec.interactions_per_user:
            raise ValueError(
                f"user {u}: only {len(candidates)} matching items for "
                f"{spec.interactions_per_user} requested interactions"
            )
        p = weights[candidates] / weights[candidates].sum()
        items = rng.choice(candidates, size=spec.interactions_per_user,
                           replace=False, p=p)
        items = rng.permutation(items)
        preferred_relations[u] = rels
        preferred_entities[u] = {m: pool_start[m] + targets[m] for m in rels}
        test[u] = np.sort(items[:n_test])
        train[u] = np.sort(items[n_test:])
    return SyntheticWorld(
        spec=spec,
        n_entities=n_entities,
        n_canonical=n_canonical,
        bridge_relation=bridge,
        triples=np.array(triples, dtype=np.int64),
        train=train,
        test=test,
        preferred_relations=preferred_relations,
        preferred_entities=preferred_entities,
    )


def write_dataset(world: SyntheticWorld, out_dir) -> dict[str, Path]:
    """Write kg_final.txt / train.txt / test.txt plus the answer-key sidecar
    and a generic relation-names file. Deterministic byte-for-byte."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "kg": out / "kg_final.txt",
        "train": out / "train.txt",
        "test": out / "test.txt",
        "answer_key": out / "answer_key.json",
        "relation_names": out / "relation_names.tsv",
        "meta": out / "meta.json",
    }
    with open(paths["kg"], "w", encoding="utf-8") as fh:
        for h, r, t in world.triples:
            fh.write(f"{h} {r} {t}\n")
    for split, data in (("train", world.train), ("test", world.test)):
        with open(paths[split], "w", encoding="utf-8") as fh:
            for u in sorted(data):
                fh.write(" ".join([str(u)] + [str(i) for i in data[u]]) + "\n")
    key = {
        str(u): {
            "relations": world.preferred_relations[u],
            "entities": {str(m): e for m, e in world.preferred_entities[u].items()},
        }
        for u in sorted(world.preferred_relations)
    }
    with open(paths["answer_key"], "w", encoding="utf-8") as fh:
        json.dump(key, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(paths["relation_names"], "w", encoding="utf-8") as fh:
        for m in range(world.n_canonical):
            name = "bridge" if m == world.bridge_relation else f"attribute{m}"
            fh.write(f"{m}\t{name}\n")
    meta = {
        "n_entities": world.n_entities,
        "n_canonical_relations": world.n_canonical,
        "n_users": world.spec.n_users,
        "n_items": world.spec.n_items,
        "bridge_relation": world.bridge_relation,
    }
    with open(paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return paths
