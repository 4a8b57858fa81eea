"""Attributed graphs, the normalized SGC operator and k-step feature propagation."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import InvalidGraph, MissingEdge, OutOfRange

Edge = tuple[int, int]


def canonical_edge(i: int, j: int) -> Edge:
    i, j = int(i), int(j)
    return (i, j) if i < j else (j, i)


def _canonical_edge_array(edges, num_nodes: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    if np.any(arr < 0) or np.any(arr >= num_nodes):
        raise InvalidGraph(f"edge endpoint outside [0, {num_nodes})")
    if np.any(arr[:, 0] == arr[:, 1]):
        bad = arr[arr[:, 0] == arr[:, 1]][0]
        raise InvalidGraph(f"self-loop on node {int(bad[0])}")
    arr = np.sort(arr, axis=1)
    return np.unique(arr, axis=0)


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected, unweighted graph with a dense node feature matrix.

    Edges are stored once as sorted ``(min, max)`` pairs; duplicates in the
    input collapse, self-loops are rejected because the normalized operator
    adds the identity on its own. Instances are immutable: edits return new
    graphs.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray

    def __init__(self, num_nodes: int, edges: Iterable[Sequence[int]] | np.ndarray, features):
        num_nodes = int(num_nodes)
        if num_nodes <= 0:
            raise InvalidGraph("num_nodes must be positive")
        feats = np.array(features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(num_nodes, -1)
        if feats.ndim != 2 or feats.shape[0] != num_nodes:
            raise InvalidGraph(
                f"features must have {num_nodes} rows, got shape {feats.shape}")
        if feats.shape[1] < 1:
            raise InvalidGraph("feature dimension must be positive")
        edge_arr = _canonical_edge_array(list(edges) if not isinstance(edges, np.ndarray) else edges,
                                         num_nodes)
        edge_arr.setflags(write=False)
        feats.setflags(write=False)
        object.__setattr__(self, "num_nodes", num_nodes)
        object.__setattr__(self, "edges", edge_arr)
        object.__setattr__(self, "features", feats)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency in CSR form (no self-loops)."""
        n = self.num_nodes
        if len(self.edges) == 0:
            return sp.csr_matrix((n, n), dtype=np.float64)
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.ones(len(rows), dtype=np.float64)
        adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        adj.sort_indices()
        return adj

    @cached_property
    def degrees(self) -> np.ndarray:
        deg = np.diff(self.adjacency.indptr).astype(np.int64)
        deg.setflags(write=False)
        return deg

    @cached_property
    def _edge_set(self) -> frozenset[Edge]:
        return frozenset((int(a), int(b)) for a, b in self.edges)

    def neighbors(self, v: int) -> np.ndarray:
        self._check_node(v)
        adj = self.adjacency
        return adj.indices[adj.indptr[v]:adj.indptr[v + 1]]

    def has_edge(self, i: int, j: int) -> bool:
        return canonical_edge(i, j) in self._edge_set

    def edge_list(self) -> list[Edge]:
        return [(int(a), int(b)) for a, b in self.edges]

    def _check_node(self, v: int) -> None:
        if not 0 <= int(v) < self.num_nodes:
            raise OutOfRange(f"node {v} outside [0, {self.num_nodes})")

    def hop_ball(self, seeds: Iterable[int], hops: int) -> np.ndarray:
        """Sorted ids of all nodes within ``hops`` edges of any seed node."""
        adj = self.adjacency
        mask = np.zeros(self.num_nodes, dtype=bool)
        frontier = np.unique(np.asarray(list(seeds), dtype=np.int64))
        mask[frontier] = True
        for _ in range(hops):
            if frontier.size == 0:
                break
            nbrs = np.concatenate([adj.indices[adj.indptr[u]:adj.indptr[u + 1]] for u in frontier])
            nbrs = np.unique(nbrs)
            frontier = nbrs[~mask[nbrs]]
            mask[frontier] = True
        return np.flatnonzero(mask)

    def with_edges(self, edges: np.ndarray) -> "AttributedGraph":
        return AttributedGraph(self.num_nodes, edges, self.features)

    def row_normalized(self) -> "AttributedGraph":
        """Copy with each feature row scaled to unit L1 norm (zero rows kept)."""
        sums = np.abs(self.features).sum(axis=1, keepdims=True)
        sums[sums == 0] = 1.0
        return AttributedGraph(self.num_nodes, self.edges, self.features / sums)


@dataclass(frozen=True)
class LabeledSplit:
    """Node labels plus disjoint train/val/test node-id sets."""

    labels: np.ndarray
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_classes: int = field(default=0)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        num_classes = int(self.num_classes) or (int(labels.max()) + 1 if labels.size else 0)
        parts = {}
        for name in ("train", "val", "test"):
            ids = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            if ids.size and (ids.min() < 0 or ids.max() >= labels.size):
                raise OutOfRange(f"{name} split references a node without a label")
            if np.unique(ids).size != ids.size:
                raise InvalidGraph(f"{name} split contains duplicate ids")
            ids.setflags(write=False)
            parts[name] = ids
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            if np.intersect1d(parts[a], parts[b]).size:
                raise InvalidGraph(f"{a} and {b} splits overlap")
        used = np.concatenate(list(parts.values()))
        if used.size and (labels[used].min() < 0 or labels[used].max() >= num_classes):
            raise InvalidGraph("label outside [0, num_classes)")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", num_classes)
        for name, ids in parts.items():
            object.__setattr__(self, name, ids)

    @property
    def num_train(self) -> int:
        return len(self.train)

    def nodes(self, which: str) -> np.ndarray:
        if which not in ("train", "val", "test"):
            raise ValueError(f"unknown split {which!r}")
        return getattr(self, which)

    def without_train_node(self, v: int) -> "LabeledSplit":
        return LabeledSplit(self.labels, self.train[self.train != v], self.val[self.val != v],
                            self.test, self.num_classes)


def build_normalized_operator(graph: AttributedGraph) -> sp.csr_matrix:
    """Return ``S = D~^{-1/2} (A + I) D~^{-1/2}`` as a CSR matrix.

    Isolated nodes keep degree 1 through their self-loop, so ``S[v, v] = 1``.
    """
    n = graph.num_nodes
    a_tilde = (graph.adjacency + sp.identity(n, format="csr", dtype=np.float64)).tocsr()
    inv_sqrt = 1.0 / np.sqrt(graph.degrees + 1.0)
    d = sp.diags(inv_sqrt)
    s = (d @ a_tilde @ d).tocsr()
    s.sort_indices()
    return s


def propagate(graph: AttributedGraph, k: int, operator: sp.csr_matrix | None = None) -> np.ndarray:
    """Compute ``Z = S^k X`` with ``k`` sparse-times-dense products."""
    if k < 0:
        raise ValueError("k must be non-negative")
    s = build_normalized_operator(graph) if operator is None else operator
    z = np.array(graph.features, dtype=np.float64)
    for _ in range(k):
        z = s @ z
    return z


def remove_edge(graph: AttributedGraph, edge: Sequence[int]) -> AttributedGraph:
    i, j = canonical_edge(*edge)
    if not graph.has_edge(i, j):
        raise MissingEdge(f"edge ({i}, {j}) not in graph")
    keep = ~((graph.edges[:, 0] == i) & (graph.edges[:, 1] == j))
    return graph.with_edges(graph.edges[keep])


def remove_node(graph: AttributedGraph, v: int) -> AttributedGraph:
    """Drop every edge incident to ``v``; the node itself stays, isolated."""
    graph._check_node(v)
    keep = (graph.edges[:, 0] != v) & (graph.edges[:, 1] != v)
    if keep.all():
        return graph
    return graph.with_edges(graph.edges[keep])
