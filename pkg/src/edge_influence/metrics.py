"""Evaluation functions f(theta, G): validation loss, Dirichlet energy, over-squashing."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graph import Graph, WeightedAdjacency, exact_hop_masks
from .model import GcnConfig, GcnParams, gcn_layers, param_slots


class MetricKind(str, enum.Enum):
    VAL_LOSS = "val-loss"
    DIRICHLET = "dirichlet"
    OVERSQUASH = "oversquash"


@dataclass(frozen=True)
class EvalMetric:
    kind: MetricKind
    hops: int | None = None  # over-squashing radius, None means model depth
    mean: bool = False  # over-squashing: average instead of sum over nodes

    @property
    def name(self) -> str:
        return self.kind.value

    @classmethod
    def parse(cls, name: str) -> "EvalMetric":
        try:
            return cls(MetricKind(name))
        except ValueError:
            known = ", ".join(k.value for k in MetricKind)
            raise ValueError(f"unknown metric {name!r} (expected one of {known})") from None


VALIDATION_LOSS = EvalMetric(MetricKind.VAL_LOSS)
DIRICHLET_ENERGY = EvalMetric(MetricKind.DIRICHLET)
OVERSQUASHING = EvalMetric(MetricKind.OVERSQUASH)
ALL_METRICS = (VALIDATION_LOSS, DIRICHLET_ENERGY, OVERSQUASHING)


class MetricProgram:
    """Scalar program f(params, adjacency) for one metric on one graph.

    Structural constants (validation nodes, |E|, exact-hop sets) come from
    `graph`; `adjacency` may materialize extra zero-weight candidate entries.
    """

    def __init__(self, metric: EvalMetric, graph: Graph, config: GcnConfig,
                 adjacency: WeightedAdjacency | None = None):
        self.metric = metric
        self.graph = graph
        self.config = config
        self.layout = config.layout
        self.adjacency = adjacency or WeightedAdjacency.from_graph(graph)
        self.pattern = ad.SparsePattern.from_adjacency(self.adjacency)
        b = ad.ProgramBuilder()
        params = param_slots(b, config)
        weights = b.slot("adjacency", (self.adjacency.num_entries,))
        x = b.slot("features", (graph.num_nodes, graph.feature_dim), differentiable=False)
        norm = ad.gcn_norm(weights, self.pattern)
        logits = gcn_layers(config, params, x, norm, self.pattern)[-1]
        if metric.kind is MetricKind.VAL_LOSS:
            f = self._val_loss(logits)
        elif metric.kind is MetricKind.DIRICHLET:
            f = self._dirichlet(logits, weights)
        else:
            f = self._oversquash(logits, params, x, norm)
        self.program = b.build({"f": f})

    def _val_loss(self, logits):
        idx = self.graph.val_idx
        if idx.size == 0:
            raise ValueError("validation loss needs a non-empty validation mask")
        return ad.nll_loss(ad.log_softmax(logits), idx, self.graph.labels, "mean")

    def _dirichlet(self, logits, weights):
        m = self.graph.num_edges
        if m == 0:
            raise ValueError("Dirichlet energy is undefined on a graph without edges")
        diff = ad.sub(ad.gather_rows(logits, self.adjacency.rows),
                      ad.gather_rows(logits, self.adjacency.cols))
        return ad.scale(ad.weighted_sum(weights, ad.row_sqnorm(diff)), 1.0 / (2 * m))

    def _oversquash(self, logits, params, x, norm):
        hops = self.metric.hops if self.metric.hops is not None else self.config.layers
        masks = exact_hop_masks(self.graph, hops)
        nodes = np.flatnonzero(masks.any(axis=1))
        self.oq_nodes = nodes
        if nodes.size == 0:
            return ad.scale(ad.total(ad.gather_rows(logits, nodes)), 0.0)
        keep = ~masks[nodes]
        masked = ad.mask_features(x, keep)
        h_masked = gcn_layers(self.config, params, masked, norm, self.pattern)[-1]
        gap = ad.sub(ad.gather_rows(logits, nodes), ad.batch_diag(h_masked, nodes))
        f = ad.total(ad.row_norm(gap))
        if self.metric.mean:
            f = ad.scale(f, 1.0 / self.graph.num_nodes)
        return f

    def inputs(self, params: GcnParams | np.ndarray, weights=None) -> dict:
        vec = params.vector if isinstance(params, GcnParams) else params
        bind = self.layout.unflatten(vec)
        bind["adjacency"] = self.adjacency.weights if weights is None else weights
        bind["features"] = self.graph.features
        return bind

    def value(self, params, weights=None) -> float:
        return float(ad.evaluate(self.program, self.inputs(params, weights))["f"])

    def gradients(self, params, weights=None) -> tuple[float, np.ndarray, np.ndarray]:
        """Returns f, df/dtheta (flat) and df/dA (one entry per adjacency entry)."""
        lin = ad.linearize(self.program, self.inputs(params, weights))
        grads = lin.vjp({"f": 1.0}, wrt=self.layout.names + ["adjacency"])
        g_adj = grads.pop("adjacency")
        return float(lin.outputs["f"]), self.layout.flatten(grads), g_adj


def dirichlet_from_embeddings(h, adjacency: WeightedAdjacency, num_edges: int) -> float:
    """(1/(2|E|)) sum over directed entries of A_ij ||h_i - h_j||^2."""
    if num_edges == 0:
        raise ValueError("Dirichlet energy is undefined on a graph without edges")
    h = np.asarray(h, dtype=np.float64)
    diff = h[adjacency.rows] - h[adjacency.cols]
    return float(adjacency.weights @ (diff * diff).sum(axis=1)) / (2 * num_edges)


def metric_program(metric: EvalMetric, graph: Graph, config: GcnConfig,
                   adjacency: WeightedAdjacency | None = None) -> MetricProgram:
    return MetricProgram(metric, graph, config, adjacency)


def evaluate_metric(metric: EvalMetric, params: GcnParams, graph: Graph) -> float:
    return metric_program(metric, graph, params.config).value(params)


def validation_loss(params: GcnParams, graph: Graph) -> float:
    return evaluate_metric(VALIDATION_LOSS, params, graph)


def dirichlet_energy(params: GcnParams, graph: Graph) -> float:
    return evaluate_metric(DIRICHLET_ENERGY, params, graph)


def oversquashing(params: GcnParams, graph: Graph, hops: int | None = None,
                  mean: bool = False) -> float:
    return evaluate_metric(EvalMetric(MetricKind.OVERSQUASH, hops, mean), params, graph)
