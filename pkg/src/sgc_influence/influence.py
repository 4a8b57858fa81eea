"""Influence estimates for removing samples, edges and nodes from an SGC training graph.

Every estimator reduces a removal to one *net gradient change* ``g`` of the
summed training loss at the fitted parameters,

    g = sum_{v affected, v != removed} [grad l(z_v + delta_v) - grad l(z_v)]
        - 1[removed node is a training node] * grad l(z_removed),

after which the parameter change is ``-(1/N) H^{-1} g`` and the change of an
evaluation loss ``f`` is ``<grad f, param_change>``. Multiple removals are
treated as additive.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import SgcInfluenceError, ValidationError
from .graph import AttributedGraph, LabeledSplit, propagate
from .model import SgcModel, conjugate_gradient, per_sample_gradients
from .perturbation import (EdgeRemoval, NodeRemoval, PerturbationDelta, SampleRemoval, Target,
                           affected_training_nodes, delta_edge_removal, delta_node_removal)

log = logging.getLogger(__name__)


class HessianSolver:
    """Applies ``H^{-1}`` at a fitted model.

    ``method="cg"`` runs a fresh conjugate-gradient solve per call.
    ``method="cholesky"`` factors the dense Hessian once; it is an exact
    linear map, useful for small models and for linearity checks.
    """

    def __init__(self, model: SgcModel, method: str = "cg", tol: float = 1e-10):
        if method not in ("cg", "cholesky"):
            raise ValueError(f"unknown solver method {method!r}")
        self.model = model
        self.method = method
        self.tol = tol
        self._obj = model.objective()
        self._theta = model.theta
        self._probs = self._obj._probs(self._theta)
        self._factor = None
        if method == "cholesky":
            self._factor = scipy.linalg.cho_factor(self._obj.hessian(self._theta))

    def hvp(self, v) -> np.ndarray:
        return self._obj.hvp(self._theta, v, self._probs)

    def solve(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=np.float64)
        if self._factor is not None:
            return scipy.linalg.cho_solve(self._factor, g)
        return conjugate_gradient(self.hvp, g, tol=self.tol)


@dataclass
class InfluenceEstimate:
    target: Target | None
    param_change: np.ndarray | None
    eval_change: float | None = None
    gradient_diff: np.ndarray | None = field(default=None, repr=False)
    affected: np.ndarray | None = field(default=None, repr=False)
    error: str | None = None

    @property
    def param_change_norm(self) -> float:
        if self.param_change is None:
            return float("nan")
        return float(np.linalg.norm(self.param_change))


@dataclass(frozen=True)
class EvalProbe:
    """``s = H^{-1} grad f`` for ``f`` = summed cross-entropy over ``nodes``."""

    nodes: np.ndarray
    grad_f: np.ndarray = field(repr=False)
    s: np.ndarray = field(repr=False)
    num_train: int


def _solver(model: SgcModel, solver: HessianSolver | None) -> HessianSolver:
    return HessianSolver(model) if solver is None else solver


def _grad(model: SgcModel, z, y) -> np.ndarray:
    return per_sample_gradients(model.theta, np.atleast_2d(z), np.atleast_1d(y), model.num_classes)


def influence_remove_sample(model: SgcModel, z, y: int, solver: HessianSolver | None = None) -> InfluenceEstimate:
    """Estimated parameter change from deleting one loss term: ``(1/N) H^{-1} grad l(z, y)``."""
    g = -_grad(model, z, y)[0]
    param = -_solver(model, solver).solve(g) / model.num_train
    return InfluenceEstimate(None, param, gradient_diff=g)


def influence_add_sample(model: SgcModel, z, y: int, solver: HessianSolver | None = None) -> InfluenceEstimate:
    """Estimated parameter change from adding one loss term; the negation of removal."""
    g = _grad(model, z, y)[0]
    param = -_solver(model, solver).solve(g) / model.num_train
    return InfluenceEstimate(None, param, gradient_diff=g)


def representation_shift_gradient(model: SgcModel, z: np.ndarray, split: LabeledSplit,
                                  delta: PerturbationDelta, exclude: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Summed ``grad l(z_v + delta_v) - grad l(z_v)`` over affected training nodes."""
    affected = affected_training_nodes(delta, split)
    if exclude is not None:
        affected = affected[affected != exclude]
    out = np.zeros(model.theta.size)
    if affected.size == 0:
        return out, affected
    pos = np.searchsorted(delta.nodes, affected)
    z_old = z[affected]
    z_new = z_old + delta.rows[pos]
    y = split.labels[affected]
    diff = _grad(model, z_new, y) - _grad(model, z_old, y)
    # fixed summation order keeps results bit-reproducible
    for row in diff:
        out += row
    return out, affected


def _is_train(split: LabeledSplit, v: int) -> bool:
    return bool(np.any(split.train == v))


def gradient_difference(model: SgcModel, z: np.ndarray, split: LabeledSplit, target: Target,
                        delta: PerturbationDelta | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Net gradient change ``g`` and the affected training set for one removal."""
    if isinstance(target, SampleRemoval):
        if not _is_train(split, target.i):
            raise ValidationError(f"node {target.i} is not a training node")
        return -_grad(model, z[target.i], split.labels[target.i])[0], np.array([target.i])
    if delta is None:
        raise ValueError("a PerturbationDelta is required for edge and node removals")
    if isinstance(target, EdgeRemoval):
        return representation_shift_gradient(model, z, split, delta)
    v = target.i
    g, affected = representation_shift_gradient(model, z, split, delta, exclude=v)
    if _is_train(split, v):
        g = g - _grad(model, z[v], split.labels[v])[0]
        affected = np.union1d(affected, [v])
    return g, affected


def influence_edge_removal(model: SgcModel, z: np.ndarray, split: LabeledSplit,
                           delta: PerturbationDelta, solver: HessianSolver | None = None) -> InfluenceEstimate:
    if not isinstance(delta.target, EdgeRemoval):
        raise ValueError("delta does not describe an edge removal")
    g, affected = gradient_difference(model, z, split, delta.target, delta)
    param = -_solver(model, solver).solve(g) / model.num_train
    return InfluenceEstimate(delta.target, param, gradient_diff=g, affected=affected)


def influence_node_removal(model: SgcModel, z: np.ndarray, split: LabeledSplit,
                           delta: PerturbationDelta, v: int | None = None,
                           solver: HessianSolver | None = None) -> InfluenceEstimate:
    """Node removal: the node's own loss term (if it trains) plus the shift of its neighbourhood.

    The removed node's own representation change is not counted; its loss
    term is gone from the objective altogether.
    """
    if not isinstance(delta.target, NodeRemoval):
        raise ValueError("delta does not describe a node removal")
    if v is not None and int(v) != delta.target.i:
        raise ValueError(f"delta was computed for node {delta.target.i}, not {v}")
    g, affected = gradient_difference(model, z, split, delta.target, delta)
    param = -_solver(model, solver).solve(g) / model.num_train
    return InfluenceEstimate(delta.target, param, gradient_diff=g, affected=affected)


def influence_decomposed(model: SgcModel, z: np.ndarray, split: LabeledSplit,
                         delta: PerturbationDelta, solver: HessianSolver | None = None) -> np.ndarray:
    """Sum of per-node add/remove influences ``I(+(z_k + d_k)) + I(-z_k)``.

    Equal to :func:`influence_edge_removal` by linearity; kept as an
    independent evaluation path.
    """
    solver = _solver(model, solver)
    total = np.zeros(model.theta.size)
    for v in affected_training_nodes(delta, split):
        row = delta.as_dict()[int(v)]
        y = int(split.labels[v])
        total += influence_add_sample(model, z[v] + row, y, solver).param_change
        total += influence_remove_sample(model, z[v], y, solver).param_change
    return total


def make_eval_probe(model: SgcModel, z: np.ndarray, split: LabeledSplit, eval_set,
                    solver: HessianSolver | None = None) -> EvalProbe:
    if isinstance(eval_set, str):
        nodes = split.nodes(eval_set)
    else:
        nodes = np.asarray(eval_set, dtype=np.int64)
    if nodes.size == 0:
        raise ValidationError("evaluation set is empty")
    labels = split.labels[nodes]
    if np.any(labels < 0):
        raise ValidationError("evaluation set contains unlabeled nodes")
    grad_f = _grad(model, z[nodes], labels).sum(axis=0)
    s = _solver(model, solver).solve(grad_f)
    return EvalProbe(nodes, grad_f, s, model.num_train)


def eval_influence(probe: EvalProbe, gradient_diff) -> float:
    """Estimated change of the evaluation loss; positive means removal raises the loss."""
    return -float(probe.s @ np.asarray(gradient_diff)) / probe.num_train


def as_target(item) -> Target:
    if isinstance(item, (EdgeRemoval, NodeRemoval, SampleRemoval)):
        return item
    if isinstance(item, (tuple, list)) and len(item) == 2:
        return EdgeRemoval(int(item[0]), int(item[1]))
    return NodeRemoval(int(item))


def perturbation_for(graph: AttributedGraph, k: int, target: Target) -> PerturbationDelta | None:
    if isinstance(target, EdgeRemoval):
        return delta_edge_removal(graph, k, (target.i, target.j))
    if isinstance(target, NodeRemoval):
        return delta_node_removal(graph, k, target.i)
    return None


def batch_influences(model: SgcModel, graph: AttributedGraph, split: LabeledSplit,
                     targets: Iterable, probe: EvalProbe, z: np.ndarray | None = None,
                     with_params: bool = True, solver: HessianSolver | None = None) -> list[InfluenceEstimate]:
    """One estimate per target, in input order.

    A target that fails (missing edge, non-training sample, solver stall)
    yields an estimate with ``error`` set instead of aborting the batch.
    """
    z = propagate(graph, model.k) if z is None else z
    solver = _solver(model, solver) if with_params else solver
    out = []
    for item in targets:
        target = None
        try:
            target = as_target(item)
            delta = perturbation_for(graph, model.k, target)
            g, affected = gradient_difference(model, z, split, target, delta)
            param = -solver.solve(g) / model.num_train if with_params else None
            out.append(InfluenceEstimate(target, param, eval_influence(probe, g), g, affected))
        except (SgcInfluenceError, ValueError, IndexError, KeyError) as exc:
            log.warning("influence for %s failed: %s", item, exc)
            out.append(InfluenceEstimate(target, None, None, error=f"{type(exc).__name__}: {exc}"))
    return out


def influence_report_rows(estimates: Sequence[InfluenceEstimate]) -> list[dict]:
    """Rows for the influence CSV (``target_type,target_a,target_b,eval_influence,param_change_norm``)."""
    rows = []
    for est in estimates:
        kind, a, b = target_fields(est.target)
        rows.append({
            "target_type": kind,
            "target_a": a,
            "target_b": b,
            "eval_influence": "" if est.eval_change is None else repr(float(est.eval_change)),
            "param_change_norm": "" if est.param_change is None else repr(est.param_change_norm),
        })
    return rows


def target_fields(target: Target | None) -> tuple[str, str, str]:
    if isinstance(target, EdgeRemoval):
        return "edge", str(target.i), str(target.j)
    if isinstance(target, NodeRemoval):
        return "node", str(target.i), ""
    if isinstance(target, SampleRemoval):
        return "sample", str(target.i), ""
    return "unknown", "", ""
