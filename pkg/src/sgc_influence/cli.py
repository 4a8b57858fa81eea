"""Command-line entry point: ``sgc-influence <command> ...``.

Exit codes: 0 on success, 2 on invalid input, 3 when training or a
linear solve fails to converge.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .bounds import lambda_sweep
from .datasets import generate_synthetic, ingest_dataset, write_bundle
from .editing import plan_attack, plan_prune_negative_edges, run_trajectory
from .errors import (DegenerateInput, InvalidGraph, MissingEdge, NonConvergence, OutOfRange, ParseError,
                     SolverStall, ValidationError)
from .graph import propagate
from .influence import (HessianSolver, batch_influences, influence_report_rows, make_eval_probe)
from .model import TrainConfig, load_checkpoint, save_model, train, with_training_data
from .oracle import sample_targets, validate_influence

log = logging.getLogger("sgc_influence")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGENCE = 0, 2, 3

INFLUENCE_COLUMNS = ["target_type", "target_a", "target_b", "eval_influence", "param_change_norm"]
SCATTER_COLUMNS = ["target_type", "target_a", "target_b", "estimated", "actual"]
SWEEP_COLUMNS = ["lambda", "edge_i", "edge_j", "degree_sum", "estimated", "actual", "observed_err",
                 "bound", "term1", "term2"]
TRAJECTORY_COLUMNS = ["step", "removed_type", "removed_a", "removed_b", "estimated_influence",
                      "val_accuracy", "test_accuracy", "val_loss"]
PLAN_COLUMNS = ["rank", "target_type", "target_a", "target_b", "estimated_influence", "strategy"]


class _Partial(Exception):
    """Outputs were written but the run stopped early on non-convergence."""


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _config(args) -> TrainConfig:
    return TrainConfig(args.lam, args.grad_tol, args.max_iters)


def _load(args):
    return ingest_dataset(args.data, row_normalize=args.row_normalize)


def _targets(args, graph, split):
    return sample_targets(graph, split, args.targets, args.sample, args.seed)


def cmd_train(args) -> int:
    ds = _load(args)
    z = propagate(ds.graph, args.k)
    model = train(z, ds.split, _config(args), k=args.k)
    save_model(model, args.out)
    s = ds.split
    summary = {"iterations": model.iterations, "grad_norm": model.grad_norm,
               "train_accuracy": model.accuracy(z[s.train], s.labels[s.train])}
    for name in ("val", "test"):
        ids = s.nodes(name)
        if ids.size:
            summary[f"{name}_accuracy"] = model.accuracy(z[ids], s.labels[ids])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_influence(args) -> int:
    ds = _load(args)
    k, config, params = load_checkpoint(args.model)
    if params.feature_dim != ds.graph.feature_dim:
        raise ValidationError(f"model expects {params.feature_dim} features, data has {ds.graph.feature_dim}")
    z = propagate(ds.graph, k)
    model = with_training_data(k, config, params, z, ds.split)
    solver = HessianSolver(model)
    probe = make_eval_probe(model, z, ds.split, args.eval, solver)
    estimates = batch_influences(model, ds.graph, ds.split, _targets(args, ds.graph, ds.split), probe,
                                 z=z, solver=solver)
    _write_csv(args.out, INFLUENCE_COLUMNS, influence_report_rows(estimates))
    failed = sum(e.error is not None for e in estimates)
    if failed:
        log.warning("%d of %d targets failed", failed, len(estimates))
    return EXIT_OK


def cmd_validate(args) -> int:
    ds = _load(args)
    targets = _targets(args, ds.graph, ds.split)
    report = validate_influence(ds.graph, ds.split, args.k, _config(args), targets, args.eval)
    _write_csv(args.out, SCATTER_COLUMNS, report.scatter_rows())
    summary = report.summary()
    if report.rho_error:
        summary["rho_error"] = report.rho_error
    _write_json(args.summary, summary)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _parse_lipschitz(text: str):
    if text == "estimate":
        return "estimate"
    if text == "none":
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected 'estimate', 'none' or a number") from None
    if value < 0:
        raise argparse.ArgumentTypeError("Lipschitz constant must be non-negative")
    return value


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad float list {text!r}") from None


def cmd_bound_sweep(args) -> int:
    ds = _load(args)
    records = lambda_sweep(ds.graph, ds.split, args.k, args.lambdas, args.edges, seed=args.seed,
                           eval_set=args.eval, lipschitz=args.lipschitz, grad_tol=args.grad_tol,
                           max_iters=args.max_iters, lipschitz_probes=args.lipschitz_probes)
    rows = [row for rec in records for row in rec.rows]
    _write_csv(args.out, SWEEP_COLUMNS, rows)
    summary = [{"lambda": r.lam, "rho": r.rho, "mean_observed_err": r.mean_observed_err,
                "mean_bound": r.mean_bound, "lipschitz": r.lipschitz, "error": r.error} for r in records]
    if args.summary:
        _write_json(args.summary, summary)
    print(json.dumps(summary, sort_keys=True))
    if any(r.error and "NonConvergence" in r.error for r in records):
        raise _Partial("sweep incomplete: some strengths did not converge")
    return EXIT_OK


def _finish_trajectory(args, report) -> int:
    _write_csv(args.out, TRAJECTORY_COLUMNS, report.csv_rows())
    summary = {"strategy": report.strategy, "steps": len(report.records) - 1,
               "baseline": {k: report.baseline[k] for k in ("val_accuracy", "test_accuracy", "val_loss")},
               "final": {k: report.final[k] for k in ("val_accuracy", "test_accuracy", "val_loss")},
               "selected_step": report.selected_step,
               "selected_test_accuracy": report.selected["test_accuracy"],
               "aborted": report.aborted}
    if args.summary:
        _write_json(args.summary, summary)
    print(json.dumps(summary, sort_keys=True))
    if report.aborted:
        raise _Partial(report.aborted)
    return EXIT_OK


def cmd_prune(args) -> int:
    ds = _load(args)
    config = _config(args)
    plan = plan_prune_negative_edges(ds.graph, ds.split, args.k, config, args.budget, args.eval,
                                     args.recompute_every)
    if args.plan_out:
        _write_csv(args.plan_out, PLAN_COLUMNS, plan.rows())
    return _finish_trajectory(args, run_trajectory(ds.graph, ds.split, args.k, config, plan, args.eval))


def cmd_attack(args) -> int:
    ds = _load(args)
    config = _config(args)
    plan = plan_attack(ds.graph, ds.split, args.k, config, args.kind, rate=args.rate,
                       baseline=args.baseline, seed=args.seed, count=args.count, eval_set=args.eval,
                       recompute_every=args.recompute_every)
    if args.plan_out:
        _write_csv(args.plan_out, PLAN_COLUMNS, plan.rows())
    return _finish_trajectory(args, run_trajectory(ds.graph, ds.split, args.k, config, plan, args.eval))


def cmd_synth(args) -> int:
    ds = generate_synthetic(seed=args.seed, blocks=args.blocks, nodes_per_block=args.nodes_per_block,
                            p_in=args.p_in, p_out=args.p_out, noise_rate=args.noise_rate,
                            feature_dim=args.feature_dim, feature_signal=args.feature_signal,
                            feature_noise=args.feature_noise, train_frac=args.train_frac,
                            val_frac=args.val_frac)
    write_bundle(ds, args.out)
    print(json.dumps(ds.summary(), sort_keys=True))
    return EXIT_OK


def _common_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset bundle directory")
    p.add_argument("--row-normalize", action="store_true", help="row-normalize features on load")
    p.add_argument("-v", "--verbose", action="store_true")


def _common_train(p: argparse.ArgumentParser, need_lambda: bool = True) -> None:
    p.add_argument("--k", type=int, default=2, help="propagation steps")
    if need_lambda:
        p.add_argument("--lambda", dest="lam", type=float, required=True, help="L2 strength")
    p.add_argument("--grad-tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=100)


def _target_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--targets", choices=["edges", "nodes", "samples"], required=True)
    p.add_argument("--sample", type=int, default=None, help="draw this many targets (default: all)")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgc-influence",
                                     description="Influence of edge, node and sample removals on SGC models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit SGC and write a checkpoint")
    _common_data(p)
    _common_train(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("influence", help="estimated influence of removals on an evaluation loss")
    _common_data(p)
    p.add_argument("--model", required=True)
    _target_args(p)
    p.add_argument("--eval", choices=["val", "test"], default="val")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_influence)

    p = sub.add_parser("validate", help="compare estimates with retrained ground truth")
    _common_data(p)
    _common_train(p)
    _target_args(p)
    p.add_argument("--eval", choices=["val", "test"], default="val")
    p.add_argument("--out", required=True)
    p.add_argument("--summary", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bound-sweep", help="estimate, retrain and bound edge removals across lambdas")
    _common_data(p)
    _common_train(p, need_lambda=False)
    p.set_defaults(max_iters=200)
    p.add_argument("--lambdas", type=_parse_floats, required=True, help="comma-separated")
    p.add_argument("--edges", type=int, required=True, help="number of sampled edges")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval", choices=["val", "test"], default="val")
    p.add_argument("--lipschitz", type=_parse_lipschitz, default="estimate",
                   help="'estimate', 'none' or a fixed constant")
    p.add_argument("--lipschitz-probes", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    p.set_defaults(func=cmd_bound_sweep)

    p = sub.add_parser("prune", help="remove negative-influence edges and retrain")
    _common_data(p)
    _common_train(p)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--eval", choices=["val", "test"], default="val")
    p.add_argument("--recompute-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plan-out")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("attack", help="remove high-influence edges or training nodes and retrain")
    _common_data(p)
    _common_train(p)
    p.add_argument("--kind", choices=["edges", "nodes"], default="edges")
    size = p.add_mutually_exclusive_group(required=True)
    size.add_argument("--rate", type=float)
    size.add_argument("--count", type=int)
    p.add_argument("--baseline", choices=["none", "random", "degree"], default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval", choices=["val", "test"], default="val")
    p.add_argument("--recompute-every", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plan-out")
    p.add_argument("--summary")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("synth", help="write a synthetic block-model bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--nodes-per-block", type=int, default=100)
    p.add_argument("--p-in", type=float, default=0.05)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--noise-rate", type=float, default=0.1)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--feature-signal", type=float, default=1.0)
    p.add_argument("--feature-noise", type=float, default=1.0)
    p.add_argument("--train-frac", type=float, default=0.3)
    p.add_argument("--val-frac", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NonConvergence, SolverStall, _Partial) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ValidationError, ParseError, InvalidGraph, MissingEdge, OutOfRange, DegenerateInput,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
