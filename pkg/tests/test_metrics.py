import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edge_influence import autodiff as ad
from edge_influence.graph import (CandidateEdit, EditKind, Graph, WeightedAdjacency,
                                  exact_hop_set)
from edge_influence.metrics import (DIRICHLET_ENERGY, VALIDATION_LOSS, EvalMetric, MetricKind,
                                    dirichlet_energy, dirichlet_from_embeddings, metric_program,
                                    oversquashing, validation_loss)
from edge_influence.model import GcnConfig, GcnParams, forward, loss_and_grad

from conftest import path_graph, random_graph, small_params


def test_validation_loss_examples(graph8, params8):
    cfg = params8.config
    zero = GcnParams(cfg, np.zeros(cfg.layout.size))
    assert validation_loss(zero, graph8) == pytest.approx(np.log(3))
    assert validation_loss(params8, graph8) == loss_and_grad(params8, graph8,
                                                             graph8.val_mask)[0]
    empty = graph8.replace(val_mask=np.zeros(8, bool))
    with pytest.raises(ValueError):
        validation_loss(params8, empty)


def test_dirichlet_examples(graph8, params8):
    g = Graph(2, 1, [[0.0], [0.0]], [0, 0], [[0, 1]], [True, False], [False, True],
              [False, False])
    adj = WeightedAdjacency.from_graph(g)
    assert dirichlet_from_embeddings([[0.0], [2.0]], adj, 1) == 4.0
    # constant embeddings: zero weights, arbitrary last bias
    blocks = {k: np.zeros_like(v) for k, v in params8.blocks.items()}
    blocks["b1"] = np.array([0.3, -2.0, 1.0])
    const = GcnParams.from_blocks(params8.config, blocks)
    assert dirichlet_energy(const, graph8) == 0.0
    logits = forward(params8, WeightedAdjacency.from_graph(graph8), graph8.features).logits
    assert dirichlet_energy(params8, graph8) == pytest.approx(
        dirichlet_from_embeddings(logits, WeightedAdjacency.from_graph(graph8),
                                  graph8.num_edges), rel=1e-13)
    with pytest.raises(ValueError):
        dirichlet_energy(params8, graph8.replace(edges=np.zeros((0, 2), int)))


def _masked_forward_norm(params, g, v, L):
    adj = WeightedAdjacency.from_graph(g)
    full = forward(params, adj, g.features).logits
    x = np.array(g.features)
    x[list(exact_hop_set(g, v, L))] = 0.0
    return np.linalg.norm(full[v] - forward(params, adj, x).logits[v])


def test_oversquashing_path_brute_force():
    g = path_graph(3)
    p = small_params(g, hidden=3, layers=2)
    expected = _masked_forward_norm(p, g, 0, 2) + _masked_forward_norm(p, g, 2, 2)
    assert exact_hop_set(g, 1, 2) == set()
    assert oversquashing(p, g, 2) == pytest.approx(expected, rel=1e-12)
    assert oversquashing(p, g, 2, mean=True) == pytest.approx(expected / 3, rel=1e-12)


def test_oversquashing_trivial_cases(graph8, params8):
    assert oversquashing(params8, graph8, hops=graph8.num_nodes) == 0.0
    iso = graph8.replace(edges=np.zeros((0, 2), int))
    assert oversquashing(params8, iso, hops=1) == 0.0
    assert EvalMetric(MetricKind.OVERSQUASH).hops is None  # resolves to model depth


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_nonnegative_and_bruteforce(seed):
    g = random_graph(seed, n=7, p=0.25)
    p = small_params(g, hidden=3, layers=2, seed=seed % 50)
    assert dirichlet_energy(p, g) >= 0.0
    f = oversquashing(p, g, 2)
    assert f >= 0.0
    assert f == pytest.approx(sum(_masked_forward_norm(p, g, v, 2) for v in range(7)),
                              rel=1e-10, abs=1e-12)


def test_metric_program_matches_functions(graph8, params8):
    for metric, fn in ((VALIDATION_LOSS, validation_loss), (DIRICHLET_ENERGY, dirichlet_energy)):
        mp = metric_program(metric, graph8, params8.config)
        assert mp.value(params8) == fn(params8, graph8)


@pytest.mark.parametrize("kind", list(MetricKind))
def test_metric_program_gradients_fd(kind):
    g = random_graph(11, n=6, p=0.3)
    p = small_params(g, hidden=3, layers=2)
    absent = next((i, j) for i in range(6) for j in range(i + 1, 6) if not g.has_edge(i, j))
    adj = WeightedAdjacency.from_graph(g, [CandidateEdit(*absent, EditKind.INSERT)])
    mp = metric_program(EvalMetric(kind, hops=2 if kind is MetricKind.OVERSQUASH else None),
                        g, p.config, adj)
    _, g_theta, g_adj = mp.gradients(p)
    inputs = mp.inputs(p)
    fd_adj = ad.finite_difference_gradient(mp.program, inputs, "adjacency", 1e-6)
    assert np.linalg.norm(g_adj - fd_adj) <= 1e-4 * np.linalg.norm(fd_adj)
    k = adj.index(*absent)
    assert np.isfinite(g_adj[k]) and abs(g_adj[k] - fd_adj[k]) <= 1e-4 * max(abs(fd_adj[k]), 1e-9)
    for name, block in p.blocks.items():
        fd = ad.finite_difference_gradient(mp.program, inputs, name, 1e-6)
        lo = p.config.layout.offsets[p.config.layout.names.index(name)]
        got = g_theta[lo:lo + block.size].reshape(block.shape)
        assert np.linalg.norm(got - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-9)


def test_receptive_field_zero_gradient():
    g = path_graph(10)
    g = g.replace(val_mask=np.eye(10, dtype=bool)[0], train_mask=np.eye(10, dtype=bool)[1],
                  test_mask=~(np.eye(10, dtype=bool)[0] | np.eye(10, dtype=bool)[1]))
    p = small_params(g, hidden=3, layers=2)
    adj = WeightedAdjacency.from_graph(g)
    _, _, g_adj = metric_program(VALIDATION_LOSS, g, p.config, adj).gradients(p)
    far = [adj.index(7, 8), adj.index(8, 7)]
    assert np.all(g_adj[far] == 0.0)
    assert g_adj[adj.index(0, 1)] != 0.0


def test_metric_names():
    assert EvalMetric.parse("oversquash").kind is MetricKind.OVERSQUASH
    assert VALIDATION_LOSS.name == "val-loss"
    with pytest.raises(ValueError):
        EvalMetric.parse("accuracy")
