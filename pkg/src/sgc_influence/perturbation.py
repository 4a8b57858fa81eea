"""Exact change in propagated node representations caused by removing an edge or a node."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import (AttributedGraph, LabeledSplit, canonical_edge, propagate, remove_edge,
                    remove_node)

# rows whose largest |entry| falls below this are rounding noise, not structure
ZERO_THRESHOLD = 1e-14


@dataclass(frozen=True)
class EdgeRemoval:
    i: int
    j: int

    def __post_init__(self):
        a, b = canonical_edge(self.i, self.j)
        object.__setattr__(self, "i", a)
        object.__setattr__(self, "j", b)


@dataclass(frozen=True)
class NodeRemoval:
    i: int


@dataclass(frozen=True)
class SampleRemoval:
    """Drop one training node's loss term while leaving the graph untouched."""

    i: int


Target = EdgeRemoval | NodeRemoval | SampleRemoval


@dataclass(frozen=True)
class PerturbationDelta:
    """Sparse row map ``node -> z'_v - z_v`` for one structural edit.

    ``nodes`` is sorted and ``rows[t]`` belongs to ``nodes[t]``; all-zero rows
    are never stored.
    """

    target: Target
    k: int
    nodes: np.ndarray
    rows: np.ndarray = field(repr=False)

    @property
    def is_zero(self) -> bool:
        return self.nodes.size == 0

    def as_dict(self) -> dict[int, np.ndarray]:
        return {int(v): r for v, r in zip(self.nodes, self.rows)}

    def dense(self, num_nodes: int) -> np.ndarray:
        out = np.zeros((num_nodes, self.rows.shape[1] if self.rows.ndim == 2 else 0))
        if self.nodes.size:
            out[self.nodes] = self.rows
        return out


def _clean(target: Target, k: int, nodes: np.ndarray, diff: np.ndarray) -> PerturbationDelta:
    diff = np.where(np.abs(diff) < ZERO_THRESHOLD, 0.0, diff)
    keep = np.abs(diff).max(axis=1, initial=0.0) >= ZERO_THRESHOLD
    nodes = np.asarray(nodes, dtype=np.int64)[keep]
    rows = diff[keep]
    nodes.setflags(write=False)
    rows.setflags(write=False)
    return PerturbationDelta(target, k, nodes, rows)


def _local_operator(graph: AttributedGraph, sub: np.ndarray, degrees: np.ndarray) -> sp.csr_matrix:
    # normalized operator restricted to `sub`, but with degrees of the whole graph
    adj = graph.adjacency[sub][:, sub]
    a_tilde = adj + sp.identity(len(sub), format="csr")
    d = sp.diags(1.0 / np.sqrt(degrees[sub] + 1.0))
    return (d @ a_tilde @ d).tocsr()


def _local_delta(graph: AttributedGraph, edited: AttributedGraph, seeds, k: int) -> tuple[np.ndarray, np.ndarray]:
    # Z rows within k hops of the seeds only depend on nodes within 2k hops,
    # so propagating on that induced subgraph (true degrees) is exact there.
    out_nodes = graph.hop_ball(seeds, k)
    sub = graph.hop_ball(out_nodes, k)
    pos = np.searchsorted(sub, out_nodes)
    x = graph.features[sub]
    s_old = _local_operator(graph, sub, graph.degrees)
    s_new = _local_operator(edited, sub, edited.degrees)
    z_old, z_new = x, x
    for _ in range(k):
        z_old = s_old @ z_old
        z_new = s_new @ z_new
    return out_nodes, z_new[pos] - z_old[pos]


def _full_delta(graph: AttributedGraph, edited: AttributedGraph, k: int) -> tuple[np.ndarray, np.ndarray]:
    diff = propagate(edited, k) - propagate(graph, k)
    return np.arange(graph.num_nodes), diff


def delta_edge_removal(graph: AttributedGraph, k: int, edge, full: bool = False) -> PerturbationDelta:
    """Representation change from deleting ``edge``.

    ``full=True`` recomputes ``S'^k X - S^k X`` on the whole graph; it is the
    slow reference path for the default localized computation.
    """
    target = EdgeRemoval(*edge)
    edited = remove_edge(graph, (target.i, target.j))
    if k == 0:
        return _clean(target, k, np.zeros(0, np.int64), np.zeros((0, graph.feature_dim)))
    if full:
        nodes, diff = _full_delta(graph, edited, k)
    else:
        nodes, diff = _local_delta(graph, edited, [target.i, target.j], k)
    return _clean(target, k, nodes, diff)


def delta_node_removal(graph: AttributedGraph, k: int, v: int, full: bool = False) -> PerturbationDelta:
    edited = remove_node(graph, v)
    target = NodeRemoval(int(v))
    if k == 0 or edited is graph:
        return _clean(target, k, np.zeros(0, np.int64), np.zeros((0, graph.feature_dim)))
    if full:
        nodes, diff = _full_delta(graph, edited, k)
    else:
        seeds = np.append(graph.neighbors(v), v)
        nodes, diff = _local_delta(graph, edited, seeds, k)
    return _clean(target, k, nodes, diff)


def affected_training_nodes(delta: PerturbationDelta, split: LabeledSplit) -> np.ndarray:
    """Training nodes whose representation changes under ``delta``."""
    return np.intersect1d(delta.nodes, split.train)
