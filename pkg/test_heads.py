"""Cluster heads, the collapse-regularized modularity loss and hardening."""
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from config.settings import HeadConfig, PipelineConfig
from src.autodiff import ops
from src.autodiff.gradcheck import grad_check
from src.autodiff.tensor import Tensor
from src.graph.frame_graph import SimilarityGraph, modularity_oracle, save_graph
from src.models.heads import (
    HeadInput,
    assign,
    cluster_frames,
    dmon_loss,
    dmon_terms,
    harden,
    infer_head,
    init_head_params,
    train_head,
    train_head_amortized,
)
from src.pipeline.stages import StageContext, run_train_head
from src.pipeline.workspace import Workspace, read_json, write_json
from src.utils.errors import DegenerateGraphError, ShapeError, StateError

TRIANGLES = SimilarityGraph.from_edges(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])
SMALL_HEAD = HeadConfig(hidden=16, k_max=4, max_steps=500, patience=100, lr=1e-2)
CLIQUE_HEAD = HeadConfig(hidden=32, k_max=16, max_steps=500, patience=100, lr=1e-2)


def two_cliques(size: int = 10, seed: int = 0):
    """Two disjoint cliques with clique-indicative features plus small noise."""
    nodes = np.arange(2 * size)
    edges = [(i, j) for i in nodes for j in nodes if i < j and (i < size) == (j < size)]
    graph = SimilarityGraph.from_edges(2 * size, edges)
    features = np.zeros((2 * size, 4))
    features[:size, 0] = 1.0
    features[size:, 1] = 1.0
    features += 0.01 * np.random.default_rng(seed).standard_normal(features.shape)
    return graph, features


def zeroed(kind: str, in_dim: int, config: HeadConfig):
    params = init_head_params(kind, in_dim, config, seed=0)
    for _, tensor in params.items():
        tensor.data[...] = 0.0
    return params


# ---------------------------------------------------------------- loss

def test_uniform_assignments_give_zero_loss():
    s = Tensor(np.full((6, 4), 0.25))
    modularity, collapse = dmon_terms(s, TRIANGLES)
    assert modularity.item() == pytest.approx(0.0, abs=1e-12)
    assert collapse.item() == pytest.approx(0.0, abs=1e-12)


def test_single_cluster_collapse_penalty():
    s = np.zeros((6, 16))
    s[:, 0] = 1.0
    modularity, collapse = dmon_terms(Tensor(s), TRIANGLES)
    assert modularity.item() == pytest.approx(0.0, abs=1e-12)
    assert collapse.item() == pytest.approx(3.0)


def test_true_split_of_triangles():
    s = np.zeros((6, 16))
    s[:3, 0] = 1.0
    s[3:, 1] = 1.0
    modularity, _ = dmon_terms(Tensor(s), TRIANGLES)
    assert modularity.item() == pytest.approx(-0.5)
    assert dmon_loss(Tensor(s), TRIANGLES).item() == pytest.approx(2 * np.sqrt(2) - 1.5, abs=1e-12)
    assert dmon_loss(Tensor(s), TRIANGLES).item() == pytest.approx(1.3284, abs=1e-4)


@pytest.mark.parametrize("k", [2, 4, 16])
def test_collapse_term_endpoints(k):
    uniform = Tensor(np.full((6, k), 1.0 / k))
    collapsed = np.zeros((6, k))
    collapsed[:, k - 1] = 1.0
    assert dmon_terms(uniform, TRIANGLES)[1].item() == pytest.approx(0.0, abs=1e-12)
    assert dmon_terms(Tensor(collapsed), TRIANGLES)[1].item() == pytest.approx(np.sqrt(k) - 1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_collapse_term_lies_between_endpoints(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 17))
    s = rng.dirichlet(np.ones(k), size=6)
    _, collapse = dmon_terms(Tensor(s), TRIANGLES)
    assert 0.0 < collapse.item() < np.sqrt(k) - 1.0


@pytest.mark.parametrize("seed", range(5))
def test_loss_ignores_cluster_order(seed):
    rng = np.random.default_rng(seed)
    s = rng.dirichlet(np.ones(5), size=6)
    order = rng.permutation(5)
    assert dmon_loss(Tensor(s[:, order]), TRIANGLES).item() == pytest.approx(dmon_loss(Tensor(s), TRIANGLES).item(), abs=1e-12)


def test_loss_rejects_mismatched_rows():
    with pytest.raises(ShapeError):
        dmon_loss(Tensor(np.full((5, 2), 0.5)), TRIANGLES)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient(seed):
    logits = np.random.default_rng(seed).standard_normal((6, 3))
    report = grad_check(lambda x: dmon_loss(ops.softmax_rows(x), TRIANGLES), [logits], seed=seed)
    assert report.passed, report.max_rel_error


# ---------------------------------------------------------------- heads

def test_zero_weights_give_uniform_rows():
    config = HeadConfig(hidden=8, k_max=4)
    features = np.random.default_rng(1).standard_normal((6, 3))
    mlp = assign(HeadInput.build(features, TRIANGLES), zeroed("mlp", 3, config), "mlp").data
    gcn = assign(HeadInput.build(features, TRIANGLES, "gcn"), zeroed("gcn", 3, config), "gcn").data
    np.testing.assert_allclose(mlp, 0.25)
    np.testing.assert_allclose(gcn, 0.25)


def test_assignment_rows_sum_to_one():
    config = HeadConfig(hidden=8, k_max=5)
    features = np.random.default_rng(2).standard_normal((6, 3))
    for kind in ("mlp", "gcn"):
        params = init_head_params(kind, 3, config, seed=3)
        rows = assign(HeadInput.build(features, TRIANGLES, kind), params, kind).data
        assert rows.shape == (6, 5)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(rows >= 0)


def test_head_input_checks():
    with pytest.raises(ShapeError):
        HeadInput.build(np.zeros((5, 3)), TRIANGLES)
    params = init_head_params("gcn", 3, HeadConfig(hidden=8, k_max=2), seed=0)
    with pytest.raises(StateError):
        assign(HeadInput.build(np.zeros((6, 3)), TRIANGLES, "mlp"), params, "gcn")
    with pytest.raises(StateError):
        init_head_params("transformer", 3, HeadConfig(hidden=8, k_max=2), seed=0)


def test_feature_width_mismatch():
    params = init_head_params("mlp", 3, HeadConfig(hidden=8, k_max=2), seed=0)
    with pytest.raises(ShapeError):
        assign(HeadInput.build(np.zeros((6, 4)), TRIANGLES), params, "mlp")


# ---------------------------------------------------------------- training

@pytest.mark.parametrize("seed", range(5))
def test_head_separates_two_cliques(seed):
    graph, features = two_cliques(seed=seed)
    result = cluster_frames(HeadInput.build(features, graph), CLIQUE_HEAD, seed=seed)
    assert result.head.steps <= 500
    clique = np.repeat([0, 1], 10)
    for cluster in range(result.hardened.k):
        assert len(set(clique[result.hardened.members(cluster)])) == 1
    assert result.k_eff == 2
    assert len(set(zip(result.partition.labels, clique))) == 2
    assert modularity_oracle(graph, result.partition) >= 0.49
    assert result.head.loss_final < result.head.losses[0]


def test_train_head_stage_writes_results(tmp_path):
    graph, features = two_cliques()
    workspace = Workspace(tmp_path)
    write_json(workspace.mixture_dir("mix0000") / "meta.json", {"mix_id": "mix0000"})
    save_graph(workspace.graph_path("mix0000"), graph)
    np.save(workspace.embeddings_path("mix0000"), features)

    summary = run_train_head(StageContext(PipelineConfig(head=CLIQUE_HEAD), workspace))
    payload = read_json(workspace.head_result_path("mix0000"))
    assert summary["mixtures"] == 1
    assert payload["kind"] == "mlp"
    assert payload["k_eff"] == 2
    assert payload["Q"] >= 49.0
    assert len(payload["assignments"]) == 20
    assert workspace.head_params_path("mix0000").exists()


def test_random_graph_has_no_community_structure():
    rng = np.random.default_rng(8)
    upper = np.triu(rng.random((200, 200)) < 0.5, k=1)
    graph = SimilarityGraph.from_edges(200, np.argwhere(upper))
    features = rng.standard_normal((200, 4))
    config = HeadConfig(hidden=16, k_max=4, max_steps=200, lr=1e-2)
    result = cluster_frames(HeadInput.build(features, graph), config, seed=2)
    assert abs(modularity_oracle(graph, result.partition)) <= 0.05


def test_training_is_deterministic():
    graph, features = two_cliques(6)
    config = HeadConfig(hidden=8, k_max=3, max_steps=40)
    first = train_head(HeadInput.build(features, graph), config, seed=9)
    second = train_head(HeadInput.build(features, graph), config, seed=9)
    np.testing.assert_array_equal(first.assignments, second.assignments)
    assert first.losses == second.losses


def test_gcn_head_trains():
    graph, features = two_cliques(6)
    config = HeadConfig(hidden=8, k_max=3, max_steps=30, kind="gcn")
    result = train_head(HeadInput.build(features, graph), config, seed=1)
    assert result.kind == "gcn"
    assert "gcn.w" in result.params.names()
    assert result.assignments.shape == (12, 3)
    assert 1 <= result.steps <= 30


def test_patience_stops_early():
    graph, features = two_cliques(6)
    config = HeadConfig(hidden=8, k_max=3, max_steps=1000, patience=1, tol=10.0)
    assert train_head(HeadInput.build(features, graph), config, seed=0).steps == 2


def test_amortized_head_applies_to_new_graphs():
    inputs = [HeadInput.build(f, g) for g, f in (two_cliques(6, seed) for seed in range(3))]
    config = HeadConfig(hidden=8, k_max=3, amortized_epochs=3, mode="amortized")
    head = train_head_amortized(inputs[:2], config, seed=4)
    assert len(head.losses) == 3
    inferred = infer_head(inputs[2], head.params, config)
    np.testing.assert_allclose(inferred.assignments.sum(axis=1), 1.0, atol=1e-12)
    assert inferred.steps == 1
    applied = cluster_frames(inputs[2], config, seed=4, params=head.params)
    assert applied.partition.n == 12


def test_amortized_needs_graphs_of_equal_width():
    graph, features = two_cliques(6)
    with pytest.raises(StateError):
        train_head_amortized([], SMALL_HEAD, seed=0)
    with pytest.raises(ShapeError):
        train_head_amortized(
            [HeadInput.build(features, graph), HeadInput.build(features[:, :3], graph)], SMALL_HEAD, seed=0
        )


# ---------------------------------------------------------------- hardening

def test_harden_argmax():
    partition, surviving = harden(np.array([[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.3, 0.7]]), 0.0)
    np.testing.assert_array_equal(partition.labels, [0, 0, 1, 1])
    assert surviving == [0, 1]


def test_harden_dissolves_small_clusters():
    assignments = np.array([
        [0.6, 0.3, 0.1],
        [0.6, 0.3, 0.1],
        [0.2, 0.7, 0.1],
        [0.3, 0.6, 0.1],
        [0.1, 0.3, 0.6],
    ])
    partition, surviving = harden(assignments, 0.0)
    np.testing.assert_array_equal(partition.labels, [0, 0, 1, 1, 1])
    assert partition.k == 2
    assert surviving == [0, 1]


def test_harden_compacts_labels():
    assignments = np.zeros((4, 3))
    assignments[:2, 0] = 1.0
    assignments[2:, 2] = 1.0
    partition, surviving = harden(assignments)
    np.testing.assert_array_equal(partition.labels, [0, 0, 1, 1])
    assert surviving == [0, 2]


def test_harden_errors():
    with pytest.raises(ShapeError):
        harden(np.zeros((0, 3)))
    with pytest.raises(DegenerateGraphError):
        harden(np.eye(3))
