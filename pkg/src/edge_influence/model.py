"""GCN architecture, parameters and the output-space cross-entropy Hessian."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import Graph, WeightedAdjacency


@dataclass(frozen=True)
class GcnConfig:
    in_dim: int
    num_classes: int
    hidden: int = 32
    layers: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("a GCN needs at least one layer")
        if min(self.in_dim, self.num_classes, self.hidden) < 1:
            raise ValueError("layer dimensions must be positive")

    @classmethod
    def for_graph(cls, graph: Graph, **kwargs) -> "GcnConfig":
        return cls(in_dim=graph.feature_dim, num_classes=graph.num_classes, **kwargs)

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [self.hidden] * (self.layers - 1) + [self.num_classes]

    @property
    def layout(self) -> ad.Layout:
        blocks = []
        dims = self.dims
        for i in range(self.layers):
            blocks.append((f"W{i}", (dims[i], dims[i + 1])))
            blocks.append((f"b{i}", (dims[i + 1],)))
        return ad.Layout(blocks)


@dataclass(frozen=True, eq=False)
class GcnParams:
    """Immutable GCN parameters stored as one flat float64 vector."""

    config: GcnConfig
    vector: np.ndarray

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64, copy=True).reshape(-1)
        if vec.size != self.config.layout.size:
            raise ad.ShapeMismatchError(
                f"parameter vector of length {vec.size} does not fit {self.config}")
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)

    @property
    def blocks(self) -> dict[str, np.ndarray]:
        return self.config.layout.unflatten(self.vector)

    def with_vector(self, vec) -> "GcnParams":
        return GcnParams(self.config, vec)

    @classmethod
    def from_blocks(cls, config: GcnConfig, blocks) -> "GcnParams":
        return cls(config, config.layout.flatten(blocks))


def init_params(config: GcnConfig) -> GcnParams:
    """Glorot-uniform weights and zero biases, seeded by config.seed."""
    rng = np.random.default_rng(config.seed)
    blocks = {}
    dims = config.dims
    for i in range(config.layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        blocks[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        blocks[f"b{i}"] = np.zeros(fan_out)
    return GcnParams.from_blocks(config, blocks)


# ---------------------------------------------------------------------------
# programs


def param_slots(builder: ad.ProgramBuilder, config: GcnConfig) -> dict[str, ad.Node]:
    return {name: builder.slot(name, shape) for name, shape in config.layout.blocks}


def gcn_layers(config: GcnConfig, params: dict, features, norm_values,
               pattern: ad.SparsePattern) -> list:
    """Record the GCN layer stack; returns the embedding node of every layer."""
    h = features
    embeddings = []
    for i in range(config.layers):
        z = ad.propagate(norm_values, ad.matmul(h, params[f"W{i}"]), pattern)
        h = ad.add_bias(z, params[f"b{i}"])
        if i < config.layers - 1:
            h = ad.relu(h)
        embeddings.append(h)
    return embeddings


class GcnProgram:
    """Logits program for a fixed (config, adjacency pattern, feature shape).

    Slots: one per parameter block, ``adjacency`` (entry weights) and
    ``features`` (held constant). Output ``logits``; optionally ``loss``, the
    cross-entropy over `loss_idx` with the given reduction.
    """

    def __init__(self, config: GcnConfig, adjacency: WeightedAdjacency, num_features: int,
                 labels=None, loss_idx=None, reduction: str = "mean",
                 return_embeddings: bool = False):
        self.config = config
        self.layout = config.layout
        self.pattern = ad.SparsePattern.from_adjacency(adjacency)
        n = adjacency.num_nodes
        b = ad.ProgramBuilder()
        self.param_nodes = param_slots(b, config)
        weights = b.slot("adjacency", (adjacency.num_entries,))
        x = b.slot("features", (n, num_features), differentiable=False)
        norm = ad.gcn_norm(weights, self.pattern)
        embeddings = gcn_layers(config, self.param_nodes, x, norm, self.pattern)
        outputs = {"logits": embeddings[-1]}
        if return_embeddings:
            outputs.update({f"h{i}": e for i, e in enumerate(embeddings)})
        if loss_idx is not None:
            outputs["loss"] = ad.nll_loss(ad.log_softmax(embeddings[-1]), loss_idx,
                                          labels, reduction)
        self.program = b.build(outputs)

    def inputs(self, params: GcnParams | np.ndarray, weights, features) -> dict:
        vec = params.vector if isinstance(params, GcnParams) else params
        bind = self.layout.unflatten(vec)
        bind["adjacency"] = weights
        bind["features"] = features
        return bind

    def linearize(self, params, weights, features) -> ad.Linearization:
        return ad.linearize(self.program, self.inputs(params, weights, features))

    def param_grad(self, lin: ad.Linearization, cotangents: dict) -> np.ndarray:
        return self.layout.flatten(lin.vjp(cotangents, wrt=self.layout.names))


@dataclass
class ForwardResult:
    logits: np.ndarray
    embeddings: list = field(default_factory=list)


def forward(params: GcnParams, adjacency: WeightedAdjacency, features) -> ForwardResult:
    features = np.asarray(features, dtype=np.float64)
    prog = GcnProgram(params.config, adjacency, features.shape[1], return_embeddings=True)
    out = ad.evaluate(prog.program, prog.inputs(params, adjacency.weights, features))
    layers = [out[f"h{i}"] for i in range(params.config.layers)]
    return ForwardResult(out["logits"], layers)


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(params: GcnParams, graph: Graph, mask) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the masked nodes and its parameter gradient."""
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise ValueError("loss mask is empty")
    adj = WeightedAdjacency.from_graph(graph)
    prog = GcnProgram(params.config, adj, graph.feature_dim, graph.labels, idx)
    lin = prog.linearize(params, adj.weights, graph.features)
    return float(lin.outputs["loss"]), prog.param_grad(lin, {"loss": 1.0})


def output_loss_hessian(logits_v, y_v=None) -> np.ndarray:
    """Hessian of cross-entropy(log_softmax(h), y) in h: diag(p) - p p^T (label-free)."""
    p = softmax(np.asarray(logits_v, dtype=np.float64))
    return np.diag(p) - np.outer(p, p)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: GcnParams, training: dict | None = None) -> None:
    doc = {
        "config": asdict(params.config),
        "params": params.vector.tolist(),
        "training": training or {},
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[GcnParams, dict]:
    doc = json.loads(Path(path).read_text())
    try:
        config = GcnConfig(**doc["config"])
        params = GcnParams(config, np.asarray(doc["params"], dtype=np.float64))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed model checkpoint ({exc})") from exc
    return params, doc.get("training", {})
