"""Influence-guided graph edits: pruning harmful edges, attack plans, baselines and retraining trajectories."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergence, SolverStall, ValidationError
from .graph import AttributedGraph, LabeledSplit, propagate
from .influence import HessianSolver, batch_influences, make_eval_probe, target_fields
from .model import SgcModel, TrainConfig, train
from .oracle import edited_problem
from .perturbation import EdgeRemoval, NodeRemoval, Target

log = logging.getLogger(__name__)

STRATEGIES = ("prune-negative", "attack-positive", "random", "degree")


@dataclass
class EditPlan:
    items: list
    scores: list
    strategy: str
    recompute_every: int = 0
    kind: str = "edges"

    def __len__(self) -> int:
        return len(self.items)

    def rows(self) -> list[dict]:
        out = []
        for rank, (item, score) in enumerate(zip(self.items, self.scores)):
            kind, a, b = target_fields(item)
            out.append({"rank": rank, "target_type": kind, "target_a": a, "target_b": b,
                        "estimated_influence": repr(float(score)), "strategy": self.strategy})
        return out


@dataclass
class TrajectoryReport:
    records: list = field(default_factory=list)
    strategy: str = ""
    aborted: str | None = None

    @property
    def baseline(self) -> dict:
        return self.records[0]

    @property
    def final(self) -> dict:
        return self.records[-1]

    @property
    def selected_step(self) -> int:
        """Earliest step with the best validation accuracy."""
        accs = [r["val_accuracy"] for r in self.records]
        return int(np.argmax(accs))

    @property
    def selected(self) -> dict:
        return self.records[self.selected_step]

    def csv_rows(self) -> list[dict]:
        rows = []
        for r in self.records:
            kind, a, b = target_fields(r["removed"]) if r["removed"] is not None else ("", "", "")
            est = r["estimated_influence"]
            rows.append({"step": r["step"], "removed_type": kind, "removed_a": a, "removed_b": b,
                         "estimated_influence": "" if est is None else repr(float(est)),
                         "val_accuracy": repr(r["val_accuracy"]),
                         "test_accuracy": repr(r["test_accuracy"]),
                         "val_loss": repr(r["val_loss"])})
        return rows


def _pool(graph: AttributedGraph, split: LabeledSplit, kind: str) -> list[Target]:
    if kind == "edges":
        return [EdgeRemoval(i, j) for i, j in graph.edge_list()]
    if kind == "nodes":
        return [NodeRemoval(int(v)) for v in split.train]
    raise ValidationError(f"unknown removal kind {kind!r}")


def _score(graph, split, k, config, items, eval_set="val", model: SgcModel | None = None,
           z: np.ndarray | None = None) -> np.ndarray:
    z = propagate(graph, k) if z is None else z
    model = train(z, split, config, k=k) if model is None else model
    solver = HessianSolver(model)
    probe = make_eval_probe(model, z, split, eval_set, solver)
    ests = batch_influences(model, graph, split, items, probe, z=z, with_params=False, solver=solver)
    return np.array([np.nan if e.eval_change is None else e.eval_change for e in ests])


def _ordered(items, scores, descending: bool) -> list[int]:
    # stable: ties keep pool order
    key = -scores if descending else scores
    return [int(i) for i in np.argsort(key, kind="stable")]


def plan_prune_negative_edges(graph: AttributedGraph, split: LabeledSplit, k: int, config: TrainConfig,
                              budget: int, eval_set="val", recompute_every: int = 0) -> EditPlan:
    """Edges whose removal is estimated to lower the evaluation loss, most negative first."""
    if budget < 0 or budget > graph.num_edges:
        raise ValidationError(f"budget must lie in [0, {graph.num_edges}]")
    items = _pool(graph, split, "edges")
    scores = _score(graph, split, k, config, items, eval_set)
    order = [i for i in _ordered(items, scores, descending=False) if scores[i] < 0][:budget]
    return EditPlan([items[i] for i in order], [float(scores[i]) for i in order], "prune-negative",
                    recompute_every, "edges")


def plan_attack(graph: AttributedGraph, split: LabeledSplit, k: int, config: TrainConfig, kind: str = "edges",
                rate: float | None = None, baseline: str = "none", seed: int = 0, count: int | None = None,
                eval_set="val", recompute_every: int = 0) -> EditPlan:
    """Removal list meant to raise the evaluation loss.

    ``baseline="none"`` ranks by estimated influence, highest first;
    ``"random"`` shuffles with ``seed``; ``"degree"`` orders nodes by degree
    (edges by the degree sum of their endpoints), largest first. Node
    attacks only ever remove training nodes. The plan size is
    ``ceil(rate * pool)`` or ``count``.
    """
    if baseline not in ("none", "random", "degree"):
        raise ValidationError(f"unknown baseline {baseline!r}")
    items = _pool(graph, split, kind)
    if count is None:
        if rate is None or not 0 < rate <= 1:
            raise ValidationError("rate must lie in (0, 1]")
        count = math.ceil(rate * len(items))
    count = min(int(count), len(items))
    scores = _score(graph, split, k, config, items, eval_set)
    if baseline == "none":
        order = _ordered(items, scores, descending=True)
        strategy = "attack-positive"
    elif baseline == "random":
        order = [int(i) for i in np.random.default_rng(seed).permutation(len(items))]
        strategy = "random"
    else:
        deg = graph.degrees
        if kind == "edges":
            key = np.array([deg[t.i] + deg[t.j] for t in items], dtype=np.float64)
        else:
            key = np.array([deg[t.i] for t in items], dtype=np.float64)
        order = _ordered(items, key, descending=True)
        strategy = "degree"
    order = order[:count]
    return EditPlan([items[i] for i in order], [float(scores[i]) for i in order], strategy,
                    recompute_every if baseline == "none" else 0, kind)


def _metrics(model: SgcModel, z: np.ndarray, split: LabeledSplit) -> dict:
    val, test = split.val, split.test
    return {
        "val_accuracy": model.accuracy(z[val], split.labels[val]),
        "test_accuracy": model.accuracy(z[test], split.labels[test]),
        "val_loss": model.total_loss(z[val], split.labels[val]) if val.size else float("nan"),
    }


def evaluate(graph: AttributedGraph, split: LabeledSplit, k: int, config: TrainConfig) -> dict:
    """Train on ``graph`` and report validation/test accuracy and validation loss."""
    z = propagate(graph, k)
    return _metrics(train(z, split, config, k=k), z, split)


def run_trajectory(graph: AttributedGraph, split: LabeledSplit, k: int, config: TrainConfig,
                   plan: EditPlan, eval_set="val") -> TrajectoryReport:
    """Apply the plan one removal at a time, retraining after each.

    Step 0 is the unedited graph. With ``plan.recompute_every > 0`` the
    remaining items are re-ranked on the current graph every that many
    steps. Evaluation and test node sets are never edited.
    """
    report = TrajectoryReport(strategy=plan.strategy)
    z = propagate(graph, k)
    model = train(z, split, config, k=k)
    report.records.append({"step": 0, "removed": None, "estimated_influence": None,
                           **_metrics(model, z, split)})
    remaining = list(zip(plan.items, plan.scores))
    step = 0
    while remaining:
        if plan.recompute_every and step and step % plan.recompute_every == 0:
            items = [t for t, _ in remaining]
            scores = _score(graph, split, k, config, items, eval_set, model=model, z=z)
            descending = plan.strategy != "prune-negative"
            remaining = [(items[i], float(scores[i])) for i in _ordered(items, scores, descending)]
        target, score = remaining.pop(0)
        step += 1
        try:
            graph, split = edited_problem(graph, split, target)
            z = propagate(graph, k)
            model = train(z, split, config, k=k)
        except (NonConvergence, SolverStall) as exc:
            report.aborted = f"step {step}: {type(exc).__name__}: {exc}"
            log.warning("trajectory aborted at %s", report.aborted)
            break
        report.records.append({"step": step, "removed": target, "estimated_influence": score,
                               **_metrics(model, z, split)})
    return report
