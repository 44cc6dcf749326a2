"""Node-classification graphs, edge edits and weighted adjacency maps."""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class GraphError(ValueError):
    """Base class for graph validation failures."""


class MalformedBundleError(GraphError):
    pass


class DimensionMismatchError(GraphError):
    pass


class LabelRangeError(GraphError):
    pass


class MaskOverlapError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class DuplicateEdgeError(GraphError):
    pass


class InvalidEditError(GraphError):
    pass


class EditKind(str, enum.Enum):
    DELETE = "delete"
    INSERT = "insert"


class EdgeClass(str, enum.Enum):
    HOMOPHILIC = "homophilic"
    HETEROPHILIC = "heterophilic"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, order=True)
class CandidateEdit:
    """A single undirected edge edit. Endpoints are stored as (min, max)."""

    u: int
    v: int
    kind: EditKind

    def __post_init__(self):
        u, v = int(self.u), int(self.v)
        if u == v:
            raise InvalidEditError(f"edit ({u},{v}) is a self-loop")
        object.__setattr__(self, "u", min(u, v))
        object.__setattr__(self, "v", max(u, v))
        object.__setattr__(self, "kind", EditKind(self.kind))

    @property
    def pair(self) -> tuple[int, int]:
        return (self.u, self.v)

    @property
    def sign(self) -> int:
        """2*I[{u,v} in E] - 1: +1 for deletions, -1 for insertions."""
        return 1 if self.kind is EditKind.DELETE else -1

    def reversed(self) -> "CandidateEdit":
        other = EditKind.INSERT if self.kind is EditKind.DELETE else EditKind.DELETE
        return CandidateEdit(self.u, self.v, other)


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    num_classes: int
    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray  # (m, 2), canonical (min, max), sorted
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    _edge_set: frozenset = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.num_nodes)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != n:
            raise DimensionMismatchError(
                f"features must have shape ({n}, d), got {features.shape}")
        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise DimensionMismatchError(f"expected {n} labels, got {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise LabelRangeError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise LabelRangeError(
                f"labels must lie in [0, {self.num_classes}), "
                f"got range [{labels.min()}, {labels.max()}]")

        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise DimensionMismatchError("edge endpoint out of range")
        loops = edges[:, 0] == edges[:, 1]
        if loops.any():
            i = int(edges[loops][0, 0])
            raise SelfLoopError(f"self-loop ({i},{i}) not allowed")
        canon = np.sort(edges, axis=1)
        pairs = [tuple(map(int, e)) for e in canon]
        edge_set = frozenset(pairs)
        if len(edge_set) != len(pairs):
            seen = set()
            for p in pairs:
                if p in seen:
                    raise DuplicateEdgeError(f"edge {p} listed more than once")
                seen.add(p)
        order = np.lexsort((canon[:, 1], canon[:, 0]))
        canon = canon[order]

        masks = []
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.asarray(getattr(self, name), dtype=bool)
            if m.shape != (n,):
                raise DimensionMismatchError(f"{name} must have length {n}")
            masks.append(m)
        if (masks[0] & masks[1]).any() or (masks[0] & masks[2]).any() \
                or (masks[1] & masks[2]).any():
            raise MaskOverlapError("train/val/test masks must be disjoint")

        object.__setattr__(self, "num_nodes", n)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "features", _frozen(features))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "edges", _frozen(canon))
        for name, m in zip(("train_mask", "val_mask", "test_mask"), masks):
            object.__setattr__(self, name, _frozen(m))
        object.__setattr__(self, "_edge_set", edge_set)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask)

    @property
    def val_idx(self) -> np.ndarray:
        return np.flatnonzero(self.val_mask)

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask)

    @property
    def num_train(self) -> int:
        return int(self.train_mask.sum())

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self._edge_set

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            adj[u].append(int(v))
            adj[v].append(int(u))
        return adj

    def replace(self, **changes) -> "Graph":
        fields_ = dict(
            num_nodes=self.num_nodes, num_classes=self.num_classes,
            features=self.features, labels=self.labels, edges=self.edges,
            train_mask=self.train_mask, val_mask=self.val_mask,
            test_mask=self.test_mask)
        fields_.update(changes)
        return Graph(**fields_)

    def to_bundle(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "num_classes": self.num_classes,
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "edges": self.edges.tolist(),
            "train": self.train_idx.tolist(),
            "val": self.val_idx.tolist(),
            "test": self.test_idx.tolist(),
        }


def graph_from_bundle(bundle: dict) -> Graph:
    required = ("num_nodes", "num_classes", "features", "labels", "edges",
                "train", "val", "test")
    if not isinstance(bundle, dict):
        raise MalformedBundleError("graph bundle must be a JSON object")
    missing = [k for k in required if k not in bundle]
    if missing:
        raise MalformedBundleError(f"graph bundle missing keys: {missing}")
    n = bundle["num_nodes"]
    if not isinstance(n, int) or n < 1:
        raise MalformedBundleError("num_nodes must be a positive integer")
    try:
        features = np.asarray(bundle["features"], dtype=np.float64)
        edges = np.asarray(bundle["edges"], dtype=np.int64).reshape(-1, 2)
        labels = np.asarray(bundle["labels"], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise MalformedBundleError(f"non-numeric graph arrays: {exc}") from exc
    masks = []
    for key in ("train", "val", "test"):
        idx = np.asarray(bundle[key], dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise DimensionMismatchError(f"{key} index out of range")
        m = np.zeros(n, dtype=bool)
        if len(np.unique(idx)) != len(idx):
            raise MalformedBundleError(f"{key} lists a node twice")
        m[idx] = True
        masks.append(m)
    return Graph(num_nodes=n, num_classes=bundle["num_classes"], features=features,
                 labels=labels, edges=edges, train_mask=masks[0],
                 val_mask=masks[1], test_mask=masks[2])


def load_graph(path) -> Graph:
    try:
        with open(path) as fh:
            bundle = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedBundleError(f"{path}: invalid JSON ({exc})") from exc
    return graph_from_bundle(bundle)


def save_graph(graph: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph.to_bundle()))


# ---------------------------------------------------------------------------
# generators


@dataclass(frozen=True)
class Barbell:
    clique_size: int = 5
    bridge_length: int = 1
    feature_noise: float = 0.5
    train_frac: float = 0.3
    val_frac: float = 0.3


@dataclass(frozen=True)
class SBM:
    sizes: tuple[int, ...] = (30, 30, 30)
    p_in: float = 0.3
    p_out: float = 0.02
    feature_noise: float = 1.0
    train_frac: float = 0.3
    val_frac: float = 0.3


def _stratified_masks(labels, num_classes, train_frac, val_frac, rng):
    n = len(labels)
    masks = np.zeros((3, n), dtype=bool)
    for c in range(num_classes):
        nodes = np.flatnonzero(labels == c)
        if nodes.size == 0:
            continue
        nodes = rng.permutation(nodes)
        n_train = max(1, int(round(train_frac * nodes.size)))
        n_val = min(int(round(val_frac * nodes.size)), nodes.size - n_train)
        masks[0, nodes[:n_train]] = True
        masks[1, nodes[n_train:n_train + n_val]] = True
        masks[2, nodes[n_train + n_val:]] = True
    return masks


def generate_graph(spec, seed: int = 0) -> Graph:
    """Build a synthetic graph; the result is a pure function of (spec, seed)."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, Barbell):
        k, b = spec.clique_size, spec.bridge_length
        if k < 3:
            raise ValueError("barbell clique_size must be >= 3")
        if b < 1:
            raise ValueError("barbell bridge_length must be >= 1")
        # clique A = 0..k-1 (junction k-1), clique B = k..2k-1 (junction k),
        # bridge nodes 2k..2k+b-2 on the path between the junctions
        n = 2 * k + b - 1
        edges = [(i, j) for off in (0, k) for i in range(off, off + k)
                 for j in range(i + 1, off + k)]
        path = [k - 1] + list(range(2 * k, 2 * k + b - 1)) + [k]
        edges += list(zip(path[:-1], path[1:]))
        labels = np.array([0] * k + [1] * k + [i % 2 for i in range(b - 1)])
        onehot = np.eye(2)[labels]
        onehot[2 * k:] = 0.0
        num_classes = 2
    elif isinstance(spec, SBM):
        sizes = tuple(int(s) for s in spec.sizes)
        if not sizes or min(sizes) < 1:
            raise ValueError("SBM blocks must be non-empty")
        for p in (spec.p_in, spec.p_out):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"SBM probability {p} outside [0, 1]")
        labels = np.repeat(np.arange(len(sizes)), sizes)
        n = len(labels)
        iu, ju = np.triu_indices(n, k=1)
        prob = np.where(labels[iu] == labels[ju], spec.p_in, spec.p_out)
        keep = rng.random(iu.size) < prob
        edges = np.stack([iu[keep], ju[keep]], axis=1)
        num_classes = len(sizes)
        onehot = np.eye(num_classes)[labels]
    else:
        raise TypeError(f"unknown generator spec {spec!r}")
    features = onehot + spec.feature_noise * rng.standard_normal(onehot.shape)
    masks = _stratified_masks(labels, num_classes, spec.train_frac, spec.val_frac, rng)
    return Graph(num_nodes=n, num_classes=num_classes, features=features,
                 labels=labels, edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2),
                 train_mask=masks[0], val_mask=masks[1], test_mask=masks[2])


# ---------------------------------------------------------------------------
# structural queries


def hop_distances(graph: Graph, source: int, max_depth: int | None = None) -> np.ndarray:
    """BFS distances from `source`; unreachable (or beyond max_depth) nodes get -1."""
    if not 0 <= source < graph.num_nodes:
        raise IndexError(f"node {source} out of range")
    adj = graph.neighbors()
    dist = np.full(graph.num_nodes, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        x = queue.popleft()
        if max_depth is not None and dist[x] >= max_depth:
            continue
        for y in adj[x]:
            if dist[y] < 0:
                dist[y] = dist[x] + 1
                queue.append(y)
    return dist


def exact_hop_set(graph: Graph, v: int, L: int) -> frozenset[int]:
    """Nodes at shortest-path distance exactly L from v."""
    if L < 1:
        raise ValueError("hop count must be >= 1")
    dist = hop_distances(graph, v, max_depth=L)
    return frozenset(int(u) for u in np.flatnonzero(dist == L))


def exact_hop_masks(graph: Graph, L: int) -> np.ndarray:
    """Boolean (n, n) matrix whose row v marks the exact-L-hop set of v."""
    if L < 1:
        raise ValueError("hop count must be >= 1")
    out = np.zeros((graph.num_nodes, graph.num_nodes), dtype=bool)
    for v in range(graph.num_nodes):
        out[v] = hop_distances(graph, v, max_depth=L) == L
    return out


def validate_edit(graph: Graph, edit: CandidateEdit) -> None:
    if edit.v >= graph.num_nodes:
        raise InvalidEditError(f"edit {edit.pair} references a node outside the graph")
    exists = graph.has_edge(edit.u, edit.v)
    if edit.kind is EditKind.DELETE and not exists:
        raise InvalidEditError(f"cannot delete absent edge {edit.pair}")
    if edit.kind is EditKind.INSERT and exists:
        raise InvalidEditError(f"cannot insert existing edge {edit.pair}")


def apply_edit(graph: Graph, edit: CandidateEdit) -> Graph:
    validate_edit(graph, edit)
    if edit.kind is EditKind.DELETE:
        keep = ~((graph.edges[:, 0] == edit.u) & (graph.edges[:, 1] == edit.v))
        edges = graph.edges[keep]
    else:
        edges = np.vstack([graph.edges, [edit.pair]])
    return graph.replace(edges=edges)


def apply_edits(graph: Graph, edits: Iterable[CandidateEdit]) -> Graph:
    for e in edits:
        graph = apply_edit(graph, e)
    return graph


def classify_edge(graph: Graph, pair: Sequence[int]) -> EdgeClass:
    u, v = pair
    if graph.labels[u] == graph.labels[v]:
        return EdgeClass.HOMOPHILIC
    return EdgeClass.HETEROPHILIC


# ---------------------------------------------------------------------------
# weighted adjacency


class CandidateNotMaterializedError(KeyError):
    pass


class WeightedAdjacency:
    """Symmetric sparse weight map over directed entries (i, j), i != j.

    Entries are kept sorted by (row, col). Zero-weight entries are allowed so
    that derivatives exist at insertion sites.
    """

    __slots__ = ("num_nodes", "rows", "cols", "weights", "_index")

    def __init__(self, num_nodes: int, rows, cols, weights, _index=None):
        self.num_nodes = int(num_nodes)
        self.rows = _frozen(np.asarray(rows, dtype=np.int64))
        self.cols = _frozen(np.asarray(cols, dtype=np.int64))
        self.weights = _frozen(np.asarray(weights, dtype=np.float64))
        if _index is None:
            _index = {(int(i), int(j)): k for k, (i, j) in enumerate(zip(self.rows, self.cols))}
        self._index = _index

    @classmethod
    def from_graph(cls, graph: Graph, candidates: Iterable = ()) -> "WeightedAdjacency":
        pairs = {tuple(map(int, e)) for e in graph.edges}
        for c in candidates:
            p = c.pair if isinstance(c, CandidateEdit) else tuple(sorted(map(int, c)))
            pairs.add(p)
        directed = sorted({(u, v) for u, v in pairs} | {(v, u) for u, v in pairs})
        if directed:
            rows, cols = map(np.array, zip(*directed))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
        weights = np.array([1.0 if graph.has_edge(i, j) else 0.0
                            for i, j in zip(rows, cols)], dtype=np.float64)
        return cls(graph.num_nodes, rows, cols, weights)

    @property
    def num_entries(self) -> int:
        return len(self.rows)

    def index(self, i: int, j: int) -> int:
        try:
            return self._index[(int(i), int(j))]
        except KeyError:
            raise CandidateNotMaterializedError(
                f"adjacency entry ({i},{j}) is not materialized") from None

    def has_entry(self, i: int, j: int) -> bool:
        return (int(i), int(j)) in self._index

    def entry(self, i: int, j: int) -> float:
        if (int(i), int(j)) not in self._index:
            return 0.0
        return float(self.weights[self._index[(int(i), int(j))]])

    def with_weights(self, weights) -> "WeightedAdjacency":
        return WeightedAdjacency(self.num_nodes, self.rows, self.cols, weights, self._index)

    def with_pair_weight(self, pair, value: float) -> "WeightedAdjacency":
        u, v = pair
        w = np.array(self.weights)
        w[self.index(u, v)] = value
        w[self.index(v, u)] = value
        return self.with_weights(w)

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        a[self.rows, self.cols] = self.weights
        return a


def reweighted_adjacency(graph: Graph, edit: CandidateEdit, eps: float,
                         base: WeightedAdjacency | None = None) -> WeightedAdjacency:
    """Adjacency with A_uv = A_uv + (2*I[{u,v} in E] - 1) * N * eps on the edit pair.

    `base` may supply a pre-materialized adjacency of `graph` (e.g. with many
    candidate entries); otherwise the edit pair alone is materialized.
    """
    validate_edit(graph, edit)
    n_train = graph.num_train
    if n_train <= 0:
        raise ValueError("graph has no training nodes")
    if base is None:
        base = WeightedAdjacency.from_graph(graph, [edit])
    current = 1.0 if graph.has_edge(edit.u, edit.v) else 0.0
    return base.with_pair_weight(edit.pair, current + edit.sign * n_train * eps)
