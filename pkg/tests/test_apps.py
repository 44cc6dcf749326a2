import numpy as np
import pytest

from edge_influence import apps
from edge_influence.graph import CandidateEdit, EdgeClass, EditKind, classify_edge
from edge_influence.influence import InfluenceBreakdown, sample_candidates
from edge_influence.metrics import DIRICHLET_ENERGY, OVERSQUASHING, VALIDATION_LOSS
from edge_influence.model import GcnConfig
from edge_influence.solvers import LissaConfig
from edge_influence.training import TrainConfig


def _b(u, v, kind, total, metric=VALIDATION_LOSS):
    return InfluenceBreakdown.of(CandidateEdit(u, v, EditKind(kind)), metric, total, 0.0)


TABLE = [_b(0, 1, "delete", 0.5), _b(0, 2, "insert", -0.2), _b(1, 3, "insert", 0.9),
         _b(2, 3, "delete", 0.5), _b(4, 5, "insert", -0.7)]


def test_attack_select_orders_and_breaks_ties():
    plan = apps.attack_select(TABLE, 3)
    assert [b.edit.pair for b in plan.entries] == [(1, 3), (0, 1), (2, 3)]
    assert plan.direction == "increase" and plan.budget == 3
    assert plan.rows()[0] == {"rank": 1, "u": 1, "v": 3, "kind": "insert", "total": 0.9}
    assert len(apps.attack_select(TABLE, 50)) == len(TABLE)
    with pytest.raises(ValueError):
        apps.attack_select([_b(0, 1, "delete", 1.0, DIRICHLET_ENERGY)], 1)
    with pytest.raises(ValueError):
        apps.attack_select(TABLE, 0)
    with pytest.raises(ValueError):
        apps.attack_select([], 1)


def test_improve_select_direction_per_metric():
    vl = apps.improve_select(TABLE, 5, VALIDATION_LOSS)
    assert [b.total for b in vl.entries] == [-0.7, -0.2] and vl.direction == "decrease"
    de_table = [_b(b.edit.u, b.edit.v, b.edit.kind.value, b.total, DIRICHLET_ENERGY)
                for b in TABLE]
    de = apps.improve_select(de_table, 2, DIRICHLET_ENERGY)
    assert [b.total for b in de.entries] == [0.9, 0.5]
    assert apps.improve_select([_b(0, 1, "delete", -1.0, OVERSQUASHING)], 3,
                               OVERSQUASHING).entries == ()


def test_edit_plan_validation():
    with pytest.raises(ValueError):
        apps.EditPlan(tuple(TABLE[:2]), 1, VALIDATION_LOSS, "increase")
    with pytest.raises(ValueError):
        apps.EditPlan((TABLE[0], _b(0, 1, "delete", 0.1)), 2, VALIDATION_LOSS, "increase")


def test_sign_counts():
    counts = apps.sign_counts(TABLE + [_b(6, 7, "insert", 0.0)], [VALIDATION_LOSS])
    assert counts == {"val-loss": {"improve": 2, "worsen": 3, "neutral": 1}}


def test_score_edit_list(graph8, params8):
    edits = sample_candidates(graph8, 2, "both", seed=2)
    table, counts = apps.score_edit_list(params8, graph8, edits, [VALIDATION_LOSS],
                                         LissaConfig(tolerance=1e-6))
    assert len(table) == 4
    assert sum(counts["val-loss"].values()) == 4
    bad = edits + [CandidateEdit(*graph8.edges[0], EditKind.INSERT)]
    with pytest.raises(apps.EditListError) as err:
        apps.score_edit_list(params8, graph8, bad, [VALIDATION_LOSS])
    assert err.value.row == 5
    assert apps.score_edit_list(params8, graph8, [], [VALIDATION_LOSS])[1] == {
        "val-loss": {"improve": 0, "worsen": 0, "neutral": 0}}


def test_homophily_summary(graph8):
    infl = [_b(*graph8.edges[i], "delete", float(i)) for i in range(4)]
    rows = apps.homophily_summary(infl, graph8)
    assert sum(r["count"] for r in rows) == 4
    for cls in EdgeClass:
        vals = [b.total for b in infl if classify_edge(graph8, b.edit.pair) is cls]
        got = apps.cell_mean(rows, VALIDATION_LOSS, EditKind.DELETE, cls)
        assert got == (pytest.approx(np.mean(vals)) if vals else None)
    assert apps.cell_mean(rows, VALIDATION_LOSS, EditKind.INSERT, EdgeClass.HOMOPHILIC) is None


def test_attack_comparison_shape(graph8):
    cfg = GcnConfig.for_graph(graph8, hidden=4, layers=2)
    plan = apps.attack_select(TABLE[:1], 1)
    out = apps.attack_comparison(graph8, plan, cfg, TrainConfig(epochs=5), seeds=range(2))
    assert len(out["clean"]) == len(out["attack"]) == len(out["random"]) == 2
    assert out["attack_drop"] == pytest.approx(np.mean(np.subtract(out["clean"],
                                                                   out["attack"])))
