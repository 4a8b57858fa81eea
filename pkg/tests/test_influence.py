import time

import numpy as np
import pytest

from sgc_influence.datasets import generate_synthetic
from sgc_influence.errors import ValidationError
from sgc_influence.graph import AttributedGraph, LabeledSplit, propagate
from sgc_influence.influence import (HessianSolver, batch_influences, eval_influence, gradient_difference,
                                     influence_add_sample, influence_decomposed, influence_edge_removal,
                                     influence_node_removal, influence_remove_sample, make_eval_probe)
from sgc_influence.model import ModelParams, SgcModel, TrainConfig, train
from sgc_influence.oracle import epsilon_downweight_probe, retrain_after_removal
from sgc_influence.perturbation import (EdgeRemoval, NodeRemoval, SampleRemoval, affected_training_nodes,
                                        delta_edge_removal, delta_node_removal)

from conftest import ref_grad_hess, small_instance

CFG = TrainConfig(0.1, 1e-12)


@pytest.fixture(scope="module")
def fitted():
    g, split = small_instance(seed=0)
    z = propagate(g, 2)
    return g, split, z, train(z, split, CFG, k=2)


def test_saturated_sample_has_no_influence():
    model = SgcModel(0, TrainConfig(1.0), ModelParams(np.array([[800.0, -800.0]]), np.zeros(2)),
                     np.array([[1.0], [-1.0]]), np.array([0, 1]))
    est = influence_remove_sample(model, [1.0], 0)
    np.testing.assert_array_equal(est.param_change, np.zeros(4))


def test_remove_is_negated_add(fitted):
    _, split, z, model = fitted
    v = split.train[0]
    rem = influence_remove_sample(model, z[v], split.labels[v]).param_change
    add = influence_add_sample(model, z[v], split.labels[v]).param_change
    np.testing.assert_array_equal(rem, -add)


def test_sample_direction_matches_downweighting():
    g, split = small_instance(seed=2, n_per_block=5)
    z = propagate(g, 2)
    model = train(z, split, CFG, k=2)
    v = split.train[0]
    est = influence_remove_sample(model, z[v], split.labels[v]).param_change
    probe = epsilon_downweight_probe(model, 0, 1e-4, grad_tol=1e-13)
    cos = est @ probe / (np.linalg.norm(est) * np.linalg.norm(probe))
    assert cos >= 0.999


def test_far_component_edge_has_no_influence():
    rng = np.random.default_rng(0)
    edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]
    g = AttributedGraph(6, edges, rng.normal(size=(6, 2)))
    split = LabeledSplit([0, 1, 0, 1, 0, 1], [0, 1, 2], [], [])
    z = propagate(g, 1)
    model = train(z, split, CFG, k=1)
    est = influence_edge_removal(model, z, split, delta_edge_removal(g, 1, (4, 5)))
    np.testing.assert_array_equal(est.param_change, np.zeros(model.theta.size))


def test_decomposed_path_matches_direct(fitted):
    g, split, z, model = fitted
    solver = HessianSolver(model, "cholesky")
    for edge in g.edge_list():
        delta = delta_edge_removal(g, 2, edge)
        direct = influence_edge_removal(model, z, split, delta, solver).param_change
        np.testing.assert_allclose(influence_decomposed(model, z, split, delta, solver), direct, atol=1e-12)


def _first_affecting_edge(g, split, k):
    for edge in g.edge_list():
        if affected_training_nodes(delta_edge_removal(g, k, edge), split).size:
            return edge
    raise AssertionError("no edge touches the training set")


def test_edge_estimate_close_to_retraining(fitted):
    g, split, z, model = fitted
    edge = _first_affecting_edge(g, split, 2)
    est = influence_edge_removal(model, z, split, delta_edge_removal(g, 2, edge))
    act = retrain_after_removal(g, split, 2, CFG, EdgeRemoval(*edge), base=model, z=z)
    rel = np.linalg.norm(act.param_change - est.param_change) / np.linalg.norm(act.param_change)
    assert rel <= 0.1


def test_node_estimate_close_to_retraining(fitted):
    g, split, z, model = fitted
    v = int(split.train[0])
    est = influence_node_removal(model, z, split, delta_node_removal(g, 2, v), v)
    act = retrain_after_removal(g, split, 2, CFG, NodeRemoval(v), base=model, z=z)
    rel = np.linalg.norm(act.param_change - est.param_change) / np.linalg.norm(act.param_change)
    assert rel <= 0.15


def test_isolated_non_training_node_has_no_influence():
    rng = np.random.default_rng(1)
    g = AttributedGraph(5, [(0, 1), (1, 2), (2, 3)], rng.normal(size=(5, 2)))
    split = LabeledSplit([0, 1, 0, 1, 0], [0, 1, 2, 3], [], [4])
    z = propagate(g, 2)
    model = train(z, split, CFG, k=2)
    est = influence_node_removal(model, z, split, delta_node_removal(g, 2, 4), 4)
    np.testing.assert_array_equal(est.param_change, np.zeros(model.theta.size))


def test_leaf_node_removal_equals_its_edge(default_dataset):
    g, split = default_dataset.graph, default_dataset.split
    z = propagate(g, 2)
    model = train(z, split, CFG, k=2)
    leaves = [v for v in range(g.num_nodes) if g.degrees[v] == 1 and v not in set(split.train.tolist())]
    assert leaves, "instance needs a non-training leaf"
    v = leaves[0]
    u = int(g.neighbors(v)[0])
    solver = HessianSolver(model, "cholesky")
    node = influence_node_removal(model, z, split, delta_node_removal(g, 2, v), v, solver).param_change
    edge = influence_edge_removal(model, z, split, delta_edge_removal(g, 2, (v, u)), solver).param_change
    np.testing.assert_allclose(node, edge, atol=1e-12)


def test_node_removal_counts_own_term(fitted):
    g, split, z, model = fitted
    v = int(split.train[1])
    gd, affected = gradient_difference(model, z, split, NodeRemoval(v), delta_node_removal(g, 2, v))
    assert v in affected.tolist()
    shift, _ = gradient_difference(model, z, split, EdgeRemoval(*g.edge_list()[0]),
                                   delta_edge_removal(g, 2, g.edge_list()[0]))
    assert gd.shape == shift.shape


def test_sample_removal_requires_training_node(fitted):
    g, split, z, model = fitted
    with pytest.raises(ValidationError):
        gradient_difference(model, z, split, SampleRemoval(int(split.test[0])))


def test_probe_zero_gradient():
    model = SgcModel(0, TrainConfig(1.0), ModelParams(np.array([[800.0, -800.0]]), np.zeros(2)),
                     np.array([[1.0], [-1.0]]), np.array([0, 1]))
    split = LabeledSplit([0, 1, 0], [0, 1], [2], [])
    probe = make_eval_probe(model, np.array([[1.0], [-1.0], [1.0]]), split, "val")
    np.testing.assert_array_equal(probe.s, np.zeros(4))


def test_probe_equals_direct_path(default_dataset):
    g, split = default_dataset.graph, default_dataset.split
    z = propagate(g, 2)
    model = train(z, split, TrainConfig(0.1), k=2)
    solver = HessianSolver(model)
    probe = make_eval_probe(model, z, split, "val", solver)
    ests = batch_influences(model, g, split, g.edge_list()[:100], probe, z=z, solver=solver)
    for e in ests:
        assert abs(e.eval_change - probe.grad_f @ e.param_change) <= 1e-9


def test_probe_large_lambda():
    g, split = small_instance(seed=1)
    z = propagate(g, 2)
    model = train(z, split, TrainConfig(1e6), k=2)
    probe = make_eval_probe(model, z, split, "val")
    expected = probe.grad_f / 1e6
    assert np.linalg.norm(probe.s - expected) <= 1e-4 * np.linalg.norm(expected)


def test_probe_matches_dense_solve(fitted):
    g, split, z, model = fitted
    probe = make_eval_probe(model, z, split, "val")
    _, h = ref_grad_hess(model.theta, model.z_train, model.y_train, 2, CFG.lam)
    np.testing.assert_allclose(probe.s, np.linalg.solve(h, probe.grad_f), atol=1e-8)


def test_eval_influence_linear(fitted):
    g, split, z, model = fitted
    probe = make_eval_probe(model, z, split, "val")
    gd = np.random.default_rng(0).normal(size=model.theta.size)
    assert eval_influence(probe, np.zeros_like(gd)) == 0.0
    assert eval_influence(probe, 3.5 * gd) == pytest.approx(3.5 * eval_influence(probe, gd), rel=1e-12)


def test_planted_edge_removal_lowers_val_loss():
    # negative eval influence: removing the noisy edge is predicted to help
    helpful = 0
    for seed in range(10):
        ds = generate_synthetic(seed=seed)
        z = propagate(ds.graph, 2)
        model = train(z, ds.split, TrainConfig(0.1), k=2)
        probe = make_eval_probe(model, z, ds.split, "val")
        edge = sorted(ds.planted_edges)[0]
        est = batch_influences(model, ds.graph, ds.split, [edge], probe, z=z, with_params=False)[0]
        helpful += est.eval_change < 0
    assert helpful >= 9


def test_batch_edge_cases(fitted):
    g, split, z, model = fitted
    probe = make_eval_probe(model, z, split, "val")
    assert batch_influences(model, g, split, [], probe, z=z) == []
    e = g.edge_list()[0]
    a, b = batch_influences(model, g, split, [e, e], probe, z=z)
    assert a.eval_change == b.eval_change
    np.testing.assert_array_equal(a.param_change, b.param_change)


def test_batch_reports_bad_targets(fitted):
    g, split, z, model = fitted
    probe = make_eval_probe(model, z, split, "val")
    missing = next((i, j) for i in range(g.num_nodes) for j in range(i + 1, g.num_nodes) if not g.has_edge(i, j))
    good, bad = batch_influences(model, g, split, [g.edge_list()[0], missing], probe, z=z)
    assert good.error is None and bad.error.startswith("MissingEdge")


def test_batch_all_edges_fast():
    ds = generate_synthetic(seed=0, nodes_per_block=25, p_in=0.2, p_out=0.02)
    z = propagate(ds.graph, 2)
    model = train(z, ds.split, TrainConfig(0.1), k=2)
    start = time.perf_counter()
    probe = make_eval_probe(model, z, ds.split, "val")
    ests = batch_influences(model, ds.graph, ds.split, ds.graph.edge_list(), probe, z=z)
    assert time.perf_counter() - start < 10.0
    assert len(ests) == ds.graph.num_edges and all(e.error is None for e in ests)
