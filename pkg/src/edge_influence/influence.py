"""Predicted influence of single edge edits on a trained GCN.

The prediction for an edit is the sum of two first-order terms:

* parameter shift: (1/N) w . (sum_train grad L(h_v; A) - grad L(h_v; A_edited)),
  with w = G^-1 grad_theta f and G the damped Gauss-Newton matrix of the
  mean training loss;
* message propagation: -sign * (df/dA_uv + df/dA_vu), sign = +1 for a
  deletion and -1 for an insertion.

The total approximates f(theta', G') - f(theta_s, G).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .graph import (CandidateEdit, EditKind, Graph, WeightedAdjacency, reweighted_adjacency,
                    validate_edit)
from .metrics import EvalMetric, MetricProgram
from .model import GcnParams, GcnProgram, softmax
from .solvers import LissaConfig, LissaInfo, estimate_scale, lissa_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InfluenceBreakdown:
    edit: CandidateEdit
    metric: EvalMetric
    param_shift: float
    msg_prop: float
    total: float

    @classmethod
    def of(cls, edit, metric, param_shift: float, msg_prop: float) -> "InfluenceBreakdown":
        return cls(edit, metric, float(param_shift), float(msg_prop),
                   float(param_shift) + float(msg_prop))

    def row(self) -> dict:
        return {"u": self.edit.u, "v": self.edit.v, "kind": self.edit.kind.value,
                "metric": self.metric.name, "param_shift": self.param_shift,
                "msg_prop": self.msg_prop, "total": self.total}


INFLUENCE_COLUMNS = ["u", "v", "kind", "metric", "param_shift", "msg_prop", "total"]


# ---------------------------------------------------------------------------
# curvature operators


def _check_layout(params: GcnParams, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != params.vector.shape:
        raise ValueError(f"vector of shape {v.shape} does not match the parameter layout "
                         f"{params.vector.shape}")
    return v


class GgnOperator:
    """v -> J^T H J v / N + damping * v over the training nodes, at fixed params.

    J is the Jacobian of the training-node logits in the parameters and H the
    block-diagonal softmax cross-entropy Hessian diag(p) - p p^T.
    """

    def __init__(self, params: GcnParams, graph: Graph, damping: float = 0.01,
                 adjacency: WeightedAdjacency | None = None):
        if damping <= 0:
            raise ValueError("damping must be positive")
        self.params = params
        self.damping = float(damping)
        self.adjacency = adjacency or WeightedAdjacency.from_graph(graph)
        self.program = GcnProgram(params.config, self.adjacency, graph.feature_dim)
        self.lin = self.program.linearize(params, self.adjacency.weights, graph.features)
        self.idx = graph.train_idx
        self.n_train = len(self.idx)
        if self.n_train == 0:
            raise ValueError("graph has no training nodes")
        self.probs = softmax(self.lin.outputs["logits"][self.idx])
        size = params.vector.size
        self.shape = (size, size)
        self.dtype = np.dtype(np.float64)

    def matvec(self, v) -> np.ndarray:
        v = _check_layout(self.params, v)
        tangents = self.program.layout.unflatten(v)
        jv = self.lin.jvp(tangents)["logits"][self.idx]
        p = self.probs
        hjv = p * jv - p * (p * jv).sum(axis=1, keepdims=True)
        cot = np.zeros(self.lin.outputs["logits"].shape)
        cot[self.idx] = hjv / self.n_train
        return self.program.param_grad(self.lin, {"logits": cot}) + self.damping * v


class HessianOperator:
    """v -> (Hessian of the mean training loss) v + damping * v, by forward-over-reverse."""

    def __init__(self, params: GcnParams, graph: Graph, damping: float = 0.01,
                 adjacency: WeightedAdjacency | None = None):
        if damping <= 0:
            raise ValueError("damping must be positive")
        self.params = params
        self.damping = float(damping)
        self.adjacency = adjacency or WeightedAdjacency.from_graph(graph)
        self.program = GcnProgram(params.config, self.adjacency, graph.feature_dim,
                                  graph.labels, graph.train_idx, reduction="mean")
        self.lin = self.program.linearize(params, self.adjacency.weights, graph.features)
        size = params.vector.size
        self.shape = (size, size)
        self.dtype = np.dtype(np.float64)

    def matvec(self, v) -> np.ndarray:
        v = _check_layout(self.params, v)
        layout = self.program.layout
        hv = self.lin.hvp(layout.unflatten(v), {"loss": 1.0}, wrt=layout.names)
        return layout.flatten(hv) + self.damping * v


def ggn_vector_product(op: GgnOperator, v) -> np.ndarray:
    return op.matvec(v)


# ---------------------------------------------------------------------------
# single-edit functions


def _edited_weights(graph: Graph, edit: CandidateEdit, adjacency: WeightedAdjacency):
    return reweighted_adjacency(graph, edit, -1.0 / graph.num_train, adjacency).weights


def grad_difference(theta_s: GcnParams, graph: Graph, edit: CandidateEdit,
                    adjacency: WeightedAdjacency | None = None) -> np.ndarray:
    """sum_train grad L(h_v) on the graph minus the same on the fully edited graph."""
    validate_edit(graph, edit)
    adjacency = adjacency or WeightedAdjacency.from_graph(graph, [edit])
    prog = GcnProgram(theta_s.config, adjacency, graph.feature_dim, graph.labels,
                      graph.train_idx, reduction="sum")
    lin = prog.linearize(theta_s, adjacency.weights, graph.features)
    lin_e = prog.linearize(theta_s, _edited_weights(graph, edit, adjacency), graph.features)
    return prog.param_grad(lin, {"loss": 1.0}) - prog.param_grad(lin_e, {"loss": 1.0})


def propagation_from_gradient(adjacency: WeightedAdjacency, grad_adj, edit: CandidateEdit) -> float:
    u, v = edit.pair
    g = grad_adj[adjacency.index(u, v)] + grad_adj[adjacency.index(v, u)]
    return float(-edit.sign * g)


def message_propagation_term(theta_s: GcnParams, graph: Graph, metric: EvalMetric,
                             edit: CandidateEdit,
                             adjacency: WeightedAdjacency | None = None) -> float:
    adjacency = adjacency or WeightedAdjacency.from_graph(graph, [edit])
    _, _, g_adj = MetricProgram(metric, graph, theta_s.config, adjacency).gradients(theta_s)
    return propagation_from_gradient(adjacency, g_adj, edit)


def influence(theta_s: GcnParams, graph: Graph, metric: EvalMetric, edit: CandidateEdit,
              w) -> InfluenceBreakdown:
    """Breakdown for one edit given w = G^-1 grad_theta f (computed once per metric)."""
    w = _check_layout(theta_s, w)
    adjacency = WeightedAdjacency.from_graph(graph, [edit])
    shift = float(w @ grad_difference(theta_s, graph, edit, adjacency)) / graph.num_train
    prop = message_propagation_term(theta_s, graph, metric, edit, adjacency)
    return InfluenceBreakdown.of(edit, metric, shift, prop)


def gif_influence(theta_s: GcnParams, graph: Graph, metric: EvalMetric, edit: CandidateEdit,
                  lissa: LissaConfig = LissaConfig()) -> float:
    """Parameter-Hessian influence without the message-propagation term."""
    adjacency = WeightedAdjacency.from_graph(graph, [edit])
    _, g_theta, _ = MetricProgram(metric, graph, theta_s.config, adjacency).gradients(theta_s)
    op = HessianOperator(theta_s, graph, lissa.damping, adjacency)
    w = lissa_solve(op, g_theta, lissa)
    return float(w @ grad_difference(theta_s, graph, edit, adjacency)) / graph.num_train


# ---------------------------------------------------------------------------
# candidate sampling


_ENUMERATE_LIMIT = 4_000_000


def _absent_pairs(graph: Graph, k: int, rng) -> list[tuple[int, int]]:
    n = graph.num_nodes
    total = n * (n - 1) // 2
    n_absent = total - graph.num_edges
    if n_absent <= 0:
        return []
    if total <= _ENUMERATE_LIMIT:
        pool = [p for p in combinations(range(n), 2) if not graph.has_edge(*p)]
        pick = rng.choice(len(pool), size=min(k, len(pool)), replace=False)
        return [pool[i] for i in pick]
    # rejection sampling on large, sparse graphs
    chosen: dict[tuple[int, int], None] = {}
    target = min(k, n_absent)
    while len(chosen) < target:
        u, v = rng.integers(0, n, size=2)
        if u == v:
            continue
        p = (int(min(u, v)), int(max(u, v)))
        if not graph.has_edge(*p):
            chosen.setdefault(p)
    return list(chosen)


def sample_candidates(graph: Graph, k: int, kinds: str = "both", seed: int = 0) -> list:
    """Uniform sample (without replacement) of k deletions and/or k insertions.

    `kinds` is "delete", "insert" or "both"; with "both", k of each are drawn.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    kinds = kinds.lower()
    if kinds not in ("delete", "insert", "both"):
        raise ValueError(f"unknown candidate kinds {kinds!r}")
    rng = np.random.default_rng(seed)
    out = []
    if kinds in ("delete", "both") and graph.num_edges:
        pick = rng.choice(graph.num_edges, size=min(k, graph.num_edges), replace=False)
        out += [CandidateEdit(*graph.edges[i], EditKind.DELETE) for i in pick]
    if kinds in ("insert", "both"):
        out += [CandidateEdit(u, v, EditKind.INSERT) for u, v in _absent_pairs(graph, k, rng)]
    return sorted(out)


# ---------------------------------------------------------------------------
# cached engine


@dataclass
class MetricState:
    value: float
    grad_theta: np.ndarray
    grad_adj: np.ndarray
    direction: np.ndarray | None = None
    gif_direction: np.ndarray | None = None
    lissa: LissaInfo | None = None
    gif_lissa: LissaInfo | None = None


@dataclass
class Diagnostics:
    lissa: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {name: {"scale": i.scale, "iterations": i.iterations,
                       "residual": i.residual, "converged": i.converged}
                for name, i in self.lissa.items()}


class InfluenceEngine:
    """Scores many candidate edits against one trained model.

    Every candidate pair is materialized (at weight zero for insertions) in one
    shared adjacency, so a single backward pass per metric yields df/dA for all
    candidates, and w = G^-1 grad_theta f is solved once per metric.
    """

    def __init__(self, params: GcnParams, graph: Graph, candidates=(),
                 lissa: LissaConfig = LissaConfig()):
        self.params = params
        self.graph = graph
        self.lissa = lissa
        for edit in candidates:
            validate_edit(graph, edit)
        self.adjacency = WeightedAdjacency.from_graph(graph, candidates)
        self.n_train = graph.num_train
        self.train_program = GcnProgram(params.config, self.adjacency, graph.feature_dim,
                                        graph.labels, graph.train_idx, reduction="sum")
        lin = self.train_program.linearize(params, self.adjacency.weights, graph.features)
        self._base_grad = self.train_program.param_grad(lin, {"loss": 1.0})
        self._metrics: dict[EvalMetric, MetricState] = {}
        self._gdiff: dict[CandidateEdit, np.ndarray] = {}
        self._ggn: GgnOperator | None = None
        self._hessian: HessianOperator | None = None
        self._scales: dict[str, float] = {}
        self.diagnostics = Diagnostics()

    # curvature -------------------------------------------------------------

    @property
    def ggn(self) -> GgnOperator:
        if self._ggn is None:
            self._ggn = GgnOperator(self.params, self.graph, self.lissa.damping, self.adjacency)
        return self._ggn

    @property
    def hessian(self) -> HessianOperator:
        if self._hessian is None:
            self._hessian = HessianOperator(self.params, self.graph, self.lissa.damping,
                                            self.adjacency)
        return self._hessian

    def _scale(self, key: str, op) -> float:
        if self.lissa.scale is not None:
            return self.lissa.scale
        if key not in self._scales:
            self._scales[key] = estimate_scale(op, self.lissa.scale_iters, self.lissa.seed)
        return self._scales[key]

    # per-metric state --------------------------------------------------------

    def metric_state(self, metric: EvalMetric) -> MetricState:
        state = self._metrics.get(metric)
        if state is None:
            prog = MetricProgram(metric, self.graph, self.params.config, self.adjacency)
            state = MetricState(*prog.gradients(self.params))
            self._metrics[metric] = state
        return state

    def direction(self, metric: EvalMetric) -> np.ndarray:
        state = self.metric_state(metric)
        if state.direction is None:
            info = LissaInfo()
            state.direction = lissa_solve(self.ggn, state.grad_theta, self.lissa, info,
                                          self._scale("ggn", self.ggn))
            state.lissa = info
            self.diagnostics.lissa[f"ggn/{metric.name}"] = info
        return state.direction

    def gif_direction(self, metric: EvalMetric) -> np.ndarray:
        state = self.metric_state(metric)
        if state.gif_direction is None:
            info = LissaInfo()
            state.gif_direction = lissa_solve(self.hessian, state.grad_theta, self.lissa, info,
                                              self._scale("hessian", self.hessian))
            state.gif_lissa = info
            self.diagnostics.lissa[f"hessian/{metric.name}"] = info
        return state.gif_direction

    # per-edit terms ----------------------------------------------------------

    def grad_difference(self, edit: CandidateEdit) -> np.ndarray:
        g = self._gdiff.get(edit)
        if g is None:
            weights = _edited_weights(self.graph, edit, self.adjacency)
            lin = self.train_program.linearize(self.params, weights, self.graph.features)
            g = self._base_grad - self.train_program.param_grad(lin, {"loss": 1.0})
            self._gdiff[edit] = g
        return g

    def propagation(self, metric: EvalMetric, edit: CandidateEdit) -> float:
        return propagation_from_gradient(self.adjacency, self.metric_state(metric).grad_adj, edit)

    def influence(self, metric: EvalMetric, edit: CandidateEdit) -> InfluenceBreakdown:
        shift = float(self.direction(metric) @ self.grad_difference(edit)) / self.n_train
        return InfluenceBreakdown.of(edit, metric, shift, self.propagation(metric, edit))

    def gif(self, metric: EvalMetric, edit: CandidateEdit) -> float:
        return float(self.gif_direction(metric) @ self.grad_difference(edit)) / self.n_train

    def scan(self, metrics, edits, workers: int | None = None) -> list[InfluenceBreakdown]:
        """Breakdowns for every (metric, edit), metric-major, in input order."""
        edits = list(edits)
        for m in metrics:
            self.direction(m)
        if workers and workers > 1 and len(edits) > 1:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(self.grad_difference, edits))
        return [self.influence(m, e) for m in metrics for e in edits]


def independence_report(breakdowns) -> dict:
    """Pearson correlation between the two terms, per metric."""
    by_metric: dict[str, list] = {}
    for b in breakdowns:
        by_metric.setdefault(b.metric.name, []).append((b.param_shift, b.msg_prop))
    out = {}
    for name, pairs in by_metric.items():
        a = np.array(pairs)
        if len(a) < 3 or np.std(a[:, 0]) == 0 or np.std(a[:, 1]) == 0:
            out[name] = {"pearson": None, "n": len(a)}
        else:
            out[name] = {"pearson": float(np.corrcoef(a[:, 0], a[:, 1])[0, 1]), "n": len(a)}
    return out
