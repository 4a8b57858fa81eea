"""Ground truth by retraining: actual parameter/loss changes and rank agreement with estimates."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInput, SgcInfluenceError, ValidationError
from .graph import AttributedGraph, LabeledSplit, propagate, remove_edge, remove_node
from .influence import (HessianSolver, InfluenceEstimate, as_target, batch_influences,
                        make_eval_probe, target_fields)
from .model import Objective, SgcModel, TrainConfig, cross_entropy, fit, minimize_objective, train
from .perturbation import EdgeRemoval, NodeRemoval, SampleRemoval, Target

log = logging.getLogger(__name__)


@dataclass
class ActualInfluence:
    target: Target
    param_change: np.ndarray
    eval_change: float
    retrain_iters: int
    model: SgcModel | None = field(default=None, repr=False)


def edited_problem(graph: AttributedGraph, split: LabeledSplit, target: Target) -> tuple[AttributedGraph, LabeledSplit]:
    """Graph and split after applying one removal."""
    if isinstance(target, EdgeRemoval):
        return remove_edge(graph, (target.i, target.j)), split
    if isinstance(target, NodeRemoval):
        return remove_node(graph, target.i), split.without_train_node(target.i)
    if not np.any(split.train == target.i):
        raise ValidationError(f"node {target.i} is not a training node")
    return graph, split.without_train_node(target.i)


def _eval_nodes(split: LabeledSplit, eval_set) -> np.ndarray:
    if isinstance(eval_set, str):
        return split.nodes(eval_set)
    return np.asarray(eval_set, dtype=np.int64)


def retrain_after_removal(graph: AttributedGraph, split: LabeledSplit, k: int, config: TrainConfig,
                          target, eval_set="val", base: SgcModel | None = None,
                          z: np.ndarray | None = None, renormalize: bool = False,
                          warm_start: bool = False, eval_on_edited: bool = False) -> ActualInfluence:
    """Retrain after one removal and report ``theta(-x) - theta`` and the eval-loss change.

    The retrained objective keeps dividing by the original training-set size
    unless ``renormalize`` is set, so that it differs from the original one
    only by the removed or shifted loss terms. The evaluation loss is summed
    cross-entropy over ``eval_set`` at the original representations (pass
    ``eval_on_edited=True`` to score the edited graph's representations).
    A removed node never counts towards the evaluation loss.
    """
    target = as_target(target)
    z = propagate(graph, k) if z is None else z
    base = train(z, split, config, k=k) if base is None else base
    edited_graph, edited_split = edited_problem(graph, split, target)
    z_new = z if edited_graph is graph else propagate(edited_graph, k)
    ids = edited_split.train
    normalizer = None if renormalize else split.num_train
    theta0 = base.theta if warm_start else None
    retrained = fit(z_new[ids], edited_split.labels[ids], split.num_classes, config, k=k,
                    theta0=theta0, normalizer=normalizer)
    nodes = _eval_nodes(split, eval_set)
    if isinstance(target, (NodeRemoval, SampleRemoval)):
        nodes = nodes[nodes != target.i]
    y_eval = split.labels[nodes]
    before = cross_entropy(base.theta, z[nodes], y_eval, split.num_classes).sum()
    z_eval = z_new if eval_on_edited else z
    after = cross_entropy(retrained.theta, z_eval[nodes], y_eval, split.num_classes).sum()
    return ActualInfluence(target, retrained.theta - base.theta, float(after - before),
                           retrained.iterations, retrained)


def epsilon_downweight_probe(model: SgcModel, index: int, epsilon: float,
                             grad_tol: float | None = None) -> np.ndarray:
    """``(theta(eps) - theta) / eps`` for the objective with ``eps * l(z_index)`` subtracted.

    ``index`` addresses a row of ``model.z_train``. Negative ``epsilon``
    upweights instead. As ``eps -> 0`` the probe tends to
    ``H^{-1} grad l(z_index, y_index)``.
    """
    n = model.num_train
    if epsilon == 0 or abs(epsilon) >= 1.0 / n:
        raise ValueError(f"need 0 < |epsilon| < 1/N = {1.0 / n}")
    weights = np.ones(n)
    weights[index] -= n * epsilon
    cfg = model.config if grad_tol is None else TrainConfig(model.lam, grad_tol, model.config.max_iters)
    obj = Objective(model.z_train, model.y_train, model.num_classes, model.lam, weights, n)
    theta, _, _ = minimize_objective(obj, cfg, model.theta)
    return (theta - model.theta) / epsilon


def downweight_limit(model: SgcModel, index: int, solver: HessianSolver | None = None) -> np.ndarray:
    """Limit of :func:`epsilon_downweight_probe` predicted by the influence function."""
    solver = HessianSolver(model) if solver is None else solver
    g = model.gradients(model.z_train[index], model.y_train[index])[0]
    return solver.solve(g)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise DegenerateInput(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise DegenerateInput("need at least two pairs")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateInput("rank correlation undefined for a constant input")
    rx = rankdata(x) - (x.size + 1) / 2.0
    ry = rankdata(y) - (y.size + 1) / 2.0
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


@dataclass
class ValidationReport:
    targets: list
    estimated: list
    actual: list
    rho: float | None
    rho_error: str | None = None
    n_failed: int = 0
    failures: list = field(default_factory=list)
    estimates: list = field(default_factory=list, repr=False)
    actuals: list = field(default_factory=list, repr=False)
    model: SgcModel | None = field(default=None, repr=False)

    def scatter_rows(self) -> list[dict]:
        rows = []
        for t, e, a in zip(self.targets, self.estimated, self.actual):
            kind, ta, tb = target_fields(t)
            rows.append({"target_type": kind, "target_a": ta, "target_b": tb,
                         "estimated": repr(float(e)), "actual": repr(float(a))})
        return rows

    def summary(self) -> dict:
        return {"rho": self.rho, "n_targets": len(self.targets) + self.n_failed,
                "n_failed": self.n_failed}


def sample_targets(graph: AttributedGraph, split: LabeledSplit, kind: str,
                   count: int | None = None, seed: int = 0) -> list[Target]:
    """Seeded subsample of removable targets of one kind ("edges", "nodes" or "samples")."""
    if kind == "edges":
        pool = [EdgeRemoval(i, j) for i, j in graph.edge_list()]
    elif kind == "nodes":
        pool = [NodeRemoval(int(v)) for v in split.train]
    elif kind == "samples":
        pool = [SampleRemoval(int(v)) for v in split.train]
    else:
        raise ValueError(f"unknown target kind {kind!r}")
    if count is None or count >= len(pool):
        return pool
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(len(pool), size=count, replace=False))
    return [pool[p] for p in picks]


def validate_influence(graph: AttributedGraph, split: LabeledSplit, k: int, config: TrainConfig,
                       targets, eval_set="val", solver_method: str = "cg",
                       keep_models: bool = False, **retrain_kwargs) -> ValidationReport:
    """Estimate then retrain for every target; rank-correlate the eval-loss changes."""
    targets = [as_target(t) for t in targets]
    if not targets:
        raise ValidationError("no targets to validate")
    z = propagate(graph, k)
    base = train(z, split, config, k=k)
    solver = HessianSolver(base, solver_method)
    probe = make_eval_probe(base, z, split, eval_set, solver)
    estimates = batch_influences(base, graph, split, targets, probe, z=z, solver=solver)
    kept, est_vals, act_vals, failures, est_kept, act_kept = [], [], [], [], [], []
    for target, est in zip(targets, estimates):
        if est.error is not None:
            failures.append((target, est.error))
            continue
        try:
            act = retrain_after_removal(graph, split, k, config, target, eval_set, base=base, z=z,
                                        **retrain_kwargs)
        except SgcInfluenceError as exc:
            log.warning("retraining for %s failed: %s", target, exc)
            failures.append((target, f"{type(exc).__name__}: {exc}"))
            continue
        if not keep_models:
            act.model = None
        kept.append(target)
        est_vals.append(est.eval_change)
        act_vals.append(act.eval_change)
        est_kept.append(est)
        act_kept.append(act)
    rho, rho_error = None, None
    try:
        rho = spearman(est_vals, act_vals)
    except DegenerateInput as exc:
        rho_error = str(exc)
    return ValidationReport(kept, est_vals, act_vals, rho, rho_error, len(failures), failures,
                            est_kept, act_kept, base)


def observed_error(estimate: InfluenceEstimate, actual: ActualInfluence) -> float:
    """``||I* - I||_2``."""
    return float(np.linalg.norm(actual.param_change - estimate.param_change))

