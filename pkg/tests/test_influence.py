import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edge_influence.graph import CandidateEdit, EditKind, WeightedAdjacency, apply_edit
from edge_influence.influence import (GgnOperator, HessianOperator, InfluenceBreakdown,
                                      InfluenceEngine, gif_influence, grad_difference,
                                      independence_report, influence,
                                      message_propagation_term, sample_candidates)
from edge_influence.metrics import ALL_METRICS, DIRICHLET_ENERGY, VALIDATION_LOSS, MetricProgram
from edge_influence.model import GcnProgram, loss_and_grad, output_loss_hessian
from edge_influence.solvers import LissaConfig, lissa_solve

from conftest import path_graph, random_graph, small_params


def _first_absent(g):
    n = g.num_nodes
    return next((i, j) for i in range(n) for j in range(i + 1, n) if not g.has_edge(i, j))


def _dense_ggn(params, g, lam):
    """Jacobian built column by column from forward-mode products, then J^T H J / N."""
    adj = WeightedAdjacency.from_graph(g)
    prog = GcnProgram(params.config, adj, g.feature_dim)
    lin = prog.linearize(params, adj.weights, g.features)
    P = params.vector.size
    idx = g.train_idx
    cols = []
    for k in range(P):
        e = np.zeros(P)
        e[k] = 1.0
        cols.append(lin.jvp(prog.layout.unflatten(e))["logits"][idx].ravel())
    J = np.array(cols).T
    C = params.config.num_classes
    H = np.zeros((len(idx) * C, len(idx) * C))
    for a, v in enumerate(idx):
        H[a * C:(a + 1) * C, a * C:(a + 1) * C] = output_loss_hessian(
            lin.outputs["logits"][v])
    return J.T @ H @ J / len(idx) + lam * np.eye(P)


def test_ggn_matches_dense_oracle(graph8, params8):
    op = GgnOperator(params8, graph8, damping=0.01)
    dense = _dense_ggn(params8, graph8, 0.01)
    P = params8.vector.size
    built = np.array([op.matvec(e) for e in np.eye(P)]).T
    assert np.abs(built - dense).max() <= 1e-10 * np.abs(dense).max()
    assert np.allclose(built, built.T, atol=1e-12)
    assert np.linalg.eigvalsh(built).min() >= 0.01 - 1e-10


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ggn_symmetric_and_damped(seed):
    g = random_graph(seed % 1000, n=7)
    p = small_params(g, hidden=3, seed=seed % 97)
    op = GgnOperator(p, g, damping=0.05)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, p.vector.size))
    assert u @ op.matvec(v) == pytest.approx(v @ op.matvec(u), rel=1e-10, abs=1e-12)
    assert v @ op.matvec(v) >= 0.05 * (v @ v) * (1 - 1e-12)


def test_ggn_saturated_predictions_leave_damping_only(graph8):
    p = small_params(graph8, hidden=3)
    blocks = dict(p.blocks)
    blocks["W1"] = 1e4 * blocks["W1"]
    blocks["b1"] = 1e4 * blocks["b1"]
    p = p.from_blocks(p.config, blocks)
    op = GgnOperator(p, graph8, damping=0.01)
    v = np.random.default_rng(0).standard_normal(p.vector.size)
    assert np.allclose(op.matvec(v), 0.01 * v, rtol=0, atol=1e-8 * np.linalg.norm(v))


def test_operator_errors(graph8, params8):
    with pytest.raises(ValueError):
        GgnOperator(params8, graph8, damping=0.0)
    with pytest.raises(ValueError):
        GgnOperator(params8, graph8).matvec(np.ones(3))
    with pytest.raises(ValueError):
        HessianOperator(params8, graph8).matvec(np.ones(3))


def test_hessian_operator_fd(graph8, params8):
    op = HessianOperator(params8, graph8, damping=0.01)
    v = np.random.default_rng(1).standard_normal(params8.vector.size)
    h = 1e-5

    def grad(x):
        return loss_and_grad(params8.with_vector(x), graph8, graph8.train_mask)[1]

    fd = (grad(params8.vector + h * v) - grad(params8.vector - h * v)) / (2 * h) + 0.01 * v
    assert np.linalg.norm(op.matvec(v) - fd) <= 1e-6 * np.linalg.norm(fd)


def test_grad_difference_negation_and_locality(graph8, params8):
    edit = CandidateEdit(*graph8.edges[0], EditKind.DELETE)
    back = CandidateEdit(*edit.pair, EditKind.INSERT)
    d = grad_difference(params8, graph8, edit)
    d_back = grad_difference(params8, apply_edit(graph8, edit), back)
    assert np.allclose(d, -d_back, rtol=1e-10, atol=1e-13)
    assert np.linalg.norm(d) > 0

    # on a path with training node 0 and two layers, edges beyond 2 hops cannot matter
    g = path_graph(10)
    p = small_params(g, hidden=3)
    far = CandidateEdit(6, 9, EditKind.INSERT)
    assert np.all(grad_difference(p, g, far) == 0.0)


def test_msg_prop_matches_fd():
    g = random_graph(3, n=7)
    p = small_params(g, hidden=3)
    for metric in ALL_METRICS:
        for edit in (CandidateEdit(*g.edges[1], EditKind.DELETE),
                     CandidateEdit(*_first_absent(g), EditKind.INSERT)):
            adj = WeightedAdjacency.from_graph(g, [edit])
            prog = MetricProgram(metric, g, p.config, adj)
            cur = 1.0 if edit.kind is EditKind.DELETE else 0.0
            h = 1e-6
            plus = prog.value(p, adj.with_pair_weight(edit.pair, cur + h).weights)
            minus = prog.value(p, adj.with_pair_weight(edit.pair, cur - h).weights)
            fd = (plus - minus) / (2 * h)
            got = message_propagation_term(p, g, metric, edit)
            assert got == pytest.approx(-edit.sign * fd, rel=1e-5, abs=1e-9)


def test_breakdown_additivity_and_engine_agreement(graph8, params8):
    edits = sample_candidates(graph8, 3, "both", seed=1)
    engine = InfluenceEngine(params8, graph8, edits, LissaConfig(tolerance=1e-10))
    table = engine.scan(ALL_METRICS, edits)
    assert [(b.metric, b.edit) for b in table] == [(m, e) for m in ALL_METRICS for e in edits]
    for b in table:
        assert b.total == b.param_shift + b.msg_prop
        single = influence(params8, graph8, b.metric, b.edit, engine.direction(b.metric))
        assert single.param_shift == pytest.approx(b.param_shift, rel=1e-9, abs=1e-14)
        assert single.msg_prop == pytest.approx(b.msg_prop, rel=1e-9, abs=1e-14)
    assert engine.grad_difference(edits[0]) is engine.grad_difference(edits[0])
    assert engine.direction(VALIDATION_LOSS) is engine.direction(VALIDATION_LOSS)
    assert set(engine.diagnostics.as_dict()) == {f"ggn/{m.name}" for m in ALL_METRICS}
    rep = independence_report(table)
    assert set(rep) == {m.name for m in ALL_METRICS}


def test_engine_rejects_invalid_candidates(graph8, params8):
    with pytest.raises(ValueError):
        InfluenceEngine(params8, graph8, [CandidateEdit(*graph8.edges[0], EditKind.INSERT)])


def test_gif_equals_param_shift_when_logits_are_linear():
    # a one-layer GCN is linear in its parameters, so its loss Hessian is the GGN
    g = random_graph(4, n=8)
    p = small_params(g, layers=1)
    cfg = LissaConfig(tolerance=1e-12, max_iters=100000)
    edits = sample_candidates(g, 2, "both", seed=0)
    engine = InfluenceEngine(p, g, edits, cfg)
    for metric in (VALIDATION_LOSS, DIRICHLET_ENERGY):
        for e in edits:
            assert engine.gif(metric, e) == pytest.approx(
                engine.influence(metric, e).param_shift, rel=1e-6, abs=1e-12)
        assert gif_influence(p, g, metric, edits[0], cfg) == pytest.approx(
            engine.gif(metric, edits[0]), rel=1e-6, abs=1e-12)


def test_sample_candidates(graph8):
    c = sample_candidates(graph8, 3, "both", seed=0)
    assert c == sorted(c) and len(c) == 6 and len({e.pair for e in c}) == 6
    assert all(graph8.has_edge(*e.pair) == (e.kind is EditKind.DELETE) for e in c)
    assert c == sample_candidates(graph8, 3, "both", seed=0)
    assert all(e.kind is EditKind.INSERT for e in sample_candidates(graph8, 2, "insert"))
    assert len(sample_candidates(graph8, 1000, "delete")) == graph8.num_edges
    with pytest.raises(ValueError):
        sample_candidates(graph8, 0)
    with pytest.raises(ValueError):
        sample_candidates(graph8, 2, "swap")
    iu = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    complete = random_graph(0, n=4).replace(edges=np.array(iu))
    assert sample_candidates(complete, 3, "insert") == []


def test_breakdown_row():
    e = CandidateEdit(2, 1, EditKind.INSERT)
    b = InfluenceBreakdown.of(e, VALIDATION_LOSS, 0.25, -1.0)
    assert b.row() == {"u": 1, "v": 2, "kind": "insert", "metric": "val-loss",
                       "param_shift": 0.25, "msg_prop": -1.0, "total": -0.75}


def test_cached_direction_matches_fresh_solve(graph8, params8):
    cfg = LissaConfig(tolerance=1e-10)
    edit = sample_candidates(graph8, 1, "insert", seed=5)[0]
    engine = InfluenceEngine(params8, graph8, [edit], cfg)
    cached = engine.influence(VALIDATION_LOSS, edit)
    _, g_theta, _ = MetricProgram(VALIDATION_LOSS, graph8, params8.config).gradients(params8)
    w = lissa_solve(GgnOperator(params8, graph8, cfg.damping), g_theta, cfg)
    fresh = influence(params8, graph8, VALIDATION_LOSS, edit, w)
    assert fresh.total == pytest.approx(cached.total, rel=1e-6)
