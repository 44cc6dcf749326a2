"""Batch procedures over influence scores: attack and improvement plans,
scoring of external rewiring traces and the homophily breakdown."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import (CandidateEdit, EdgeClass, EditKind, Graph, GraphError, apply_edits,
                    classify_edge, validate_edit)
from .influence import InfluenceBreakdown, InfluenceEngine, sample_candidates
from .metrics import ALL_METRICS, EvalMetric, MetricKind
from .model import GcnConfig, GcnParams
from .solvers import LissaConfig
from .training import TrainConfig, accuracy, train


@dataclass(frozen=True)
class EditPlan:
    entries: tuple  # InfluenceBreakdowns in application order
    budget: int
    metric: EvalMetric
    direction: str  # "increase" or "decrease" of the metric's total

    def __post_init__(self):
        if len(self.entries) > self.budget:
            raise ValueError("plan exceeds its budget")
        pairs = [b.edit.pair for b in self.entries]
        if len(set(pairs)) != len(pairs):
            raise ValueError("plan edits the same pair twice")

    @property
    def edits(self) -> list[CandidateEdit]:
        return [b.edit for b in self.entries]

    def __len__(self):
        return len(self.entries)

    def rows(self) -> list[dict]:
        return [{"rank": i + 1, "u": b.edit.u, "v": b.edit.v, "kind": b.edit.kind.value,
                 "total": b.total} for i, b in enumerate(self.entries)]


PLAN_COLUMNS = ["rank", "u", "v", "kind", "total"]


def _take(ranked, k: int) -> tuple:
    out, seen = [], set()
    for b in ranked:
        if len(out) == k:
            break
        if b.edit.pair not in seen:
            seen.add(b.edit.pair)
            out.append(b)
    return tuple(out)


def _check(influences, k: int, metric: EvalMetric | None = None) -> list:
    influences = list(influences)
    if not influences:
        raise ValueError("no influence scores to select from")
    if k < 1:
        raise ValueError("budget must be at least 1")
    if metric is not None and any(b.metric != metric for b in influences):
        raise ValueError(f"influences must all be computed for {metric.name}")
    return influences


def attack_select(influences, k: int) -> EditPlan:
    """Top-k edits predicted to raise validation loss the most."""
    metric = EvalMetric(MetricKind.VAL_LOSS)
    influences = _check(influences, k, metric)
    ranked = sorted(influences, key=lambda b: (-b.total, b.edit))
    return EditPlan(_take(ranked, k), k, metric, "increase")


def improve_select(influences, k: int, metric: EvalMetric) -> EditPlan:
    """Up to k edits predicted to help: most negative totals for validation loss,
    most positive totals for Dirichlet energy and over-squashing."""
    influences = _check(influences, k, metric)
    if metric.kind is MetricKind.VAL_LOSS:
        ranked = sorted((b for b in influences if b.total < 0), key=lambda b: (b.total, b.edit))
        direction = "decrease"
    else:
        ranked = sorted((b for b in influences if b.total > 0), key=lambda b: (-b.total, b.edit))
        direction = "increase"
    return EditPlan(_take(ranked, k), k, metric, direction)


def apply_plan(graph: Graph, plan: EditPlan) -> Graph:
    return apply_edits(graph, plan.edits)


class EditListError(ValueError):
    def __init__(self, row: int, edit: CandidateEdit, reason: str):
        super().__init__(f"row {row}: {edit.u},{edit.v},{edit.kind.value}: {reason}")
        self.row, self.edit, self.reason = row, edit, reason


def score_edit_list(theta_s: GcnParams, graph: Graph, edits, metrics=ALL_METRICS,
                    lissa: LissaConfig = LissaConfig()) -> tuple[list, dict]:
    """Influence table for an external edit list and per-metric sign counts.

    Each edit is scored on its own against the unedited graph.
    """
    edits = list(edits)
    for row, edit in enumerate(edits, start=1):
        try:
            validate_edit(graph, edit)
        except GraphError as exc:
            raise EditListError(row, edit, str(exc)) from None
    if not edits:
        return [], {m.name: {"improve": 0, "worsen": 0, "neutral": 0} for m in metrics}
    engine = InfluenceEngine(theta_s, graph, edits, lissa)
    table = engine.scan(metrics, edits)
    return table, sign_counts(table, metrics)


def sign_counts(table, metrics=ALL_METRICS) -> dict:
    """Counts of edits predicted to improve or worsen each metric.

    Lower is better for validation loss; higher is better for the other two.
    """
    out = {}
    for m in metrics:
        totals = np.array([b.total for b in table if b.metric == m])
        better = totals < 0 if m.kind is MetricKind.VAL_LOSS else totals > 0
        worse = totals > 0 if m.kind is MetricKind.VAL_LOSS else totals < 0
        out[m.name] = {"improve": int(better.sum()), "worsen": int(worse.sum()),
                       "neutral": int(len(totals) - better.sum() - worse.sum())}
    return out


HOMOPHILY_COLUMNS = ["kind", "class", "metric", "mean", "count"]


def homophily_summary(influences, graph: Graph) -> list[dict]:
    """Mean total per (kind, homophilic/heterophilic, metric); empty cells are left out."""
    cells: dict[tuple, list] = {}
    for b in influences:
        cls = classify_edge(graph, b.edit.pair)
        cells.setdefault((b.metric.name, b.edit.kind, cls), []).append(b.total)
    rows = []
    for (metric, kind, cls), vals in sorted(cells.items(), key=lambda kv: (
            kv[0][0], kv[0][1].value, kv[0][2].value)):
        rows.append({"kind": kind.value, "class": cls.value, "metric": metric,
                     "mean": float(np.mean(vals)), "count": len(vals)})
    return rows


def cell_mean(rows, metric: EvalMetric, kind: EditKind, cls: EdgeClass) -> float | None:
    for r in rows:
        if (r["metric"], r["kind"], r["class"]) == (metric.name, kind.value, cls.value):
            return r["mean"]
    return None


# ---------------------------------------------------------------------------
# attack evaluation


def retrained_accuracy(graph: Graph, model_config: GcnConfig, train_config: TrainConfig,
                       seed: int) -> float:
    """Test accuracy of a model trained from seed `seed` on `graph`."""
    cfg = GcnConfig(model_config.in_dim, model_config.num_classes, model_config.hidden,
                    model_config.layers, seed)
    params, _ = train(graph, cfg, train_config)
    return accuracy(params, graph, graph.test_mask)


def attack_comparison(graph: Graph, plan: EditPlan, model_config: GcnConfig,
                      train_config: TrainConfig = TrainConfig(), seeds=range(5),
                      pool: list | None = None) -> dict:
    """Test-accuracy drop of the plan versus the same number of random edits.

    For every seed the clean graph, the attacked graph and a randomly edited
    graph (edits drawn from `pool`, or from fresh candidates) are retrained
    from that seed's initialization.
    """
    k = len(plan)
    attacked = apply_plan(graph, plan)
    clean, att, rnd = [], [], []
    for s in seeds:
        rng = np.random.default_rng(s)
        cands = pool if pool is not None else sample_candidates(graph, 10 * k, "both", s)
        order = rng.permutation(len(cands))
        chosen, seen = [], set()
        for i in order:
            if cands[i].pair not in seen:
                seen.add(cands[i].pair)
                chosen.append(cands[i])
            if len(chosen) == k:
                break
        clean.append(retrained_accuracy(graph, model_config, train_config, s))
        att.append(retrained_accuracy(attacked, model_config, train_config, s))
        rnd.append(retrained_accuracy(apply_edits(graph, chosen), model_config,
                                      train_config, s))
    clean, att, rnd = map(np.array, (clean, att, rnd))
    return {"clean": clean.tolist(), "attack": att.tolist(), "random": rnd.tolist(),
            "attack_drop": float((clean - att).mean()),
            "random_drop": float((clean - rnd).mean())}
