"""Knowledge-graph-enhanced recommender with per-relation attribute blocks.

Items are represented by concatenating per-relation embedding blocks
aggregated from the knowledge graph; users get an unnormalized per-relation
interest gate on top of their interacted items. Training is pairwise ranking
with sparse Adam; evaluation is full-ranking Recall@K / NDCG@K.
"""

from kgrec.kg import KnowledgeGraph, InteractionSet, load_kg, load_interactions
from kgrec.embedding import (
    DimensionSchedule,
    AttributeLayout,
    ParameterStore,
    compute_dims,
    build_layout,
    init_params,
)

__all__ = [
    "KnowledgeGraph",
    "InteractionSet",
    "load_kg",
    "load_interactions",
    "DimensionSchedule",
    "AttributeLayout",
    "ParameterStore",
    "compute_dims",
    "build_layout",
    "init_params",
]
