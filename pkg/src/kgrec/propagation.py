"""Aggregation layers producing block-pure entity representations.

Layer 0 fills each relation's block with the mean of one-hop neighbor
embeddings from that relation's attribute space (zero block when the
attribute is absent). Later layers transport full previous-layer vectors
through relation-normalized adjacency and sum across relations; the final
representation is the elementwise sum over layers. Because blocks are
concatenated and never mixed, block m stays a linear function of
attribute-space-m embeddings only.

The whole pipeline is linear in the parameters, so the backward pass is
the transpose transport and needs no cached activations.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from kgrec.embedding import AttributeLayout, ParameterStore
from kgrec.kg import KnowledgeGraph

COMBINE_MODES = ("concat", "mean", "sum")


def relation_adjacency(
    g: KnowledgeGraph, m: int, keep: np.ndarray | None = None
) -> sp.csr_matrix:
    """Row-normalized reverse adjacency of relation m: A[i, j] = 1/|N_i^m|
    for j in N_i^m. ``keep`` masks entities out of every neighbor set, with
    the mean renormalized over survivors."""
    n = g.n_entities
    ptr, heads = g.indptr[m], g.heads[m]
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(ptr))
    cols = heads
    if keep is not None:
        sel = keep[cols]
        rows, cols = rows[sel], cols[sel]
    deg = np.bincount(rows, minlength=n)
    vals = 1.0 / deg[rows] if len(rows) else np.empty(0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class Propagator:
    """Forward/backward transport over a fixed (possibly masked) graph view.

    ``combine`` selects how relation blocks are merged at layer 0:
    concatenation (default) or the elementwise mean/sum ablations, which
    require a uniform block width.
    """

    def __init__(
        self,
        graph: KnowledgeGraph,
        layout: AttributeLayout,
        n_layers: int,
        combine: str = "concat",
        keep: np.ndarray | None = None,
    ):
        if combine not in COMBINE_MODES:
            raise ValueError(f"combine must be one of {COMBINE_MODES}")
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if graph.n_relations != layout.n_relations:
            raise ValueError("layout relation count does not match graph")
        if combine != "concat" and len(set(layout.dims.tolist())) > 1:
            raise ValueError(f"combine={combine!r} requires uniform block widths")
        self.graph = graph
        self.layout = layout
        self.n_layers = n_layers
        self.combine = combine
        self.adj = [relation_adjacency(graph, m, keep) for m in range(graph.n_relations)]
        self.transport = sum(self.adj[1:], self.adj[0]).tocsr()
        if combine == "mean":
            present = np.stack([(np.diff(graph.indptr[m]) > 0) for m in range(graph.n_relations)])
            if keep is not None:
                present = np.stack(
                    [np.asarray((a != 0).sum(axis=1)).ravel() > 0 for a in self.adj]
                )
            self._mean_div = np.maximum(present.sum(axis=0), 1).astype(np.float64)

    @property
    def width(self) -> int:
        """Width of the produced representations."""
        if self.combine == "concat":
            return self.layout.width
        return int(self.layout.dims[0])

    def layer0(self, params: ParameterStore) -> np.ndarray:
        n = self.graph.n_entities
        if self.combine == "concat":
            e0 = np.zeros((n, self.layout.width))
            for m in range(self.layout.n_relations):
                e0[:, self.layout.block(m)] = self.adj[m] @ params.entity[m]
            return e0
        acc = np.zeros((n, self.width))
        for m in range(self.layout.n_relations):
            acc += self.adj[m] @ params.entity[m]
        if self.combine == "mean":
            acc /= self._mean_div[:, None]
        return acc

    def forward(self, params: ParameterStore) -> tuple[list[np.ndarray], np.ndarray]:
        """All layer states e^(0..L-1) plus their sum e*."""
        layers = [self.layer0(params)]
        for _ in range(self.n_layers - 1):
            layers.append(self.transport @ layers[-1])
        return layers, readout(layers)

    def entity_reps(self, params: ParameterStore) -> np.ndarray:
        """Final representations only, without keeping per-layer states."""
        cur = self.layer0(params)
        acc = cur.copy()
        for _ in range(self.n_layers - 1):
            cur = self.transport @ cur
            acc += cur
        return acc

    def backward(self, d_estar: np.ndarray) -> list[np.ndarray]:
        """Gradients w.r.t. each attribute-space table from a gradient
        w.r.t. the final representations (dense (n_entities, width))."""
        g = d_estar
        for _ in range(self.n_layers - 1):
            g = self.transport.T @ g + d_estar
        if self.combine == "mean":
            g = g / self._mean_div[:, None]
        grads = []
        for m in range(self.layout.n_relations):
            gm = g[:, self.layout.block(m)] if self.combine == "concat" else g
            grads.append(self.adj[m].T @ gm)
        return grads

    def touched_rows(self, indicator: np.ndarray) -> list[np.ndarray]:
        """Structurally reachable rows of each attribute table, given a
        boolean indicator of entities whose final representation is used."""
        t = indicator.astype(np.float64)
        cur = t
        for _ in range(self.n_layers - 1):
            cur = self.transport.T @ cur + t
        touched = []
        for m in range(self.layout.n_relations):
            touched.append(np.flatnonzero(self.adj[m].T @ (cur > 0) > 0))
        return touched


def readout(layers: list[np.ndarray]) -> np.ndarray:
    """Elementwise sum over layer states."""
    if not layers:
        raise ValueError("need at least one layer state")
    width = layers[0].shape[-1]
    for a in layers[1:]:
        if a.shape[-1] != width:
            raise ValueError("layer widths differ")
    return np.sum(layers, axis=0)
