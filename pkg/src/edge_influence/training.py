"""Full-batch SGD training, edge-edit PBRF fine-tuning and plain retraining."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import CandidateEdit, Graph, WeightedAdjacency, reweighted_adjacency
from .model import GcnConfig, GcnParams, GcnProgram, init_params, softmax

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.03
    weight_decay: float = 1e-4
    epochs: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError(f"invalid training configuration {self}")


@dataclass(frozen=True)
class PbrfConfig:
    damping: float = 0.01
    eps: float | None = None  # None means -1/N
    steps: int = 500
    lr: float = 0.03
    tolerance: float = 1e-7

    def __post_init__(self):
        if self.damping <= 0:
            raise ValueError("PBRF damping must be positive")
        if self.steps < 1:
            raise ValueError("PBRF needs at least one step")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)

    def __len__(self):
        return len(self.train_loss)

    def final(self) -> dict:
        if not self.train_loss:
            return {}
        return {"train_loss": self.train_loss[-1], "val_loss": self.val_loss[-1],
                "val_acc": self.val_acc[-1]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_acc)):
                w.writerow([i, *(repr(float(x)) for x in row)])


def _log_softmax(h):
    z = h - h.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _run_sgd(graph: Graph, init: GcnParams, cfg: TrainConfig,
             adjacency: WeightedAdjacency | None = None) -> tuple[GcnParams, TrainHistory]:
    train_idx = graph.train_idx
    if train_idx.size == 0:
        raise ValueError("graph has no training nodes")
    adjacency = adjacency or WeightedAdjacency.from_graph(graph)
    prog = GcnProgram(init.config, adjacency, graph.feature_dim, graph.labels, train_idx)
    val_idx = graph.val_idx
    y_val = graph.labels[val_idx]
    theta = np.array(init.vector)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        lin = prog.linearize(theta, adjacency.weights, graph.features)
        loss = float(lin.outputs["loss"])
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
        logits = lin.outputs["logits"]
        if val_idx.size:
            lp = _log_softmax(logits[val_idx])
            hist.val_loss.append(float(-lp[np.arange(len(val_idx)), y_val].mean()))
            hist.val_acc.append(float((lp.argmax(axis=1) == y_val).mean()))
        else:
            hist.val_loss.append(float("nan"))
            hist.val_acc.append(float("nan"))
        hist.train_loss.append(loss)
        grad = prog.param_grad(lin, {"loss": 1.0})
        theta = theta - cfg.lr * (grad + cfg.weight_decay * theta)
    if not np.all(np.isfinite(theta)):
        raise TrainingDivergedError("non-finite parameters after training")
    return init.with_vector(theta), hist


def train(graph: Graph, model_config: GcnConfig,
          train_config: TrainConfig = TrainConfig()) -> tuple[GcnParams, TrainHistory]:
    """Train from the seeded Glorot initialization of `model_config`."""
    return _run_sgd(graph, init_params(model_config), train_config)


def retrain_plain(graph_edited: Graph, init: GcnParams,
                  train_config: TrainConfig = TrainConfig()) -> GcnParams:
    """Standard training on an (edited) graph from a given initialization."""
    return _run_sgd(graph_edited, init, train_config)[0]


def accuracy(params: GcnParams, graph: Graph, mask) -> float:
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    adj = WeightedAdjacency.from_graph(graph)
    prog = GcnProgram(params.config, adj, graph.feature_dim)
    logits = prog.linearize(params, adj.weights, graph.features).outputs["logits"]
    return float((logits[idx].argmax(axis=1) == graph.labels[idx]).mean())


# ---------------------------------------------------------------------------
# edge-edit PBRF


class PbrfObjective:
    """Edge-edit proximal Bregman response objective around theta_s.

    J(theta) = (1/N) sum_v D(h_v(theta), h_v(theta_s)) + (lambda/2)||theta - theta_s||^2
               + eps * sum_v [CE(h_v(theta)) - CE(h^eps_v(theta))]
    over training nodes v, with D the Bregman divergence of cross-entropy.
    """

    def __init__(self, graph: Graph, theta_s: GcnParams, edit: CandidateEdit,
                 config: PbrfConfig, adjacency: WeightedAdjacency | None = None):
        self.graph = graph
        self.theta_s = theta_s.vector
        self.config = config
        n_train = graph.num_train
        self.eps = -1.0 / n_train if config.eps is None else float(config.eps)
        base = adjacency or WeightedAdjacency.from_graph(graph, [edit])
        self.weights = base.weights
        self.weights_eps = reweighted_adjacency(graph, edit, self.eps, base).weights
        self.program = GcnProgram(theta_s.config, base, graph.feature_dim)
        self.idx = graph.train_idx
        self.y = graph.labels[self.idx]
        self.onehot = np.eye(graph.num_classes)[self.y]
        self.n_train = n_train
        h_s = self._logits(self.theta_s, self.weights)[0][self.idx]
        self.h_s = h_s
        lp_s = _log_softmax(h_s)
        self.loss_s = -lp_s[np.arange(len(self.idx)), self.y]
        self.p_s = softmax(h_s)
        self.dloss_s = self.p_s - self.onehot

    def _logits(self, theta, weights):
        lin = self.program.linearize(theta, weights, self.graph.features)
        return lin.outputs["logits"], lin

    def value_and_grad(self, theta) -> tuple[float, np.ndarray]:
        rows = np.arange(len(self.idx))
        logits, lin = self._logits(theta, self.weights)
        h = logits[self.idx]
        lp = _log_softmax(h)
        loss = -lp[rows, self.y]
        bregman = loss - self.loss_s - (self.dloss_s * (h - self.h_s)).sum(axis=1)
        diff = theta - self.theta_s
        lam = self.config.damping
        value = bregman.sum() / self.n_train + 0.5 * lam * float(diff @ diff)
        cot = np.zeros_like(logits)
        cot[self.idx] = (np.exp(lp) - self.p_s) / self.n_train
        if self.eps != 0.0:
            logits_e, lin_e = self._logits(theta, self.weights_eps)
            lp_e = _log_softmax(logits_e[self.idx])
            value += self.eps * (loss.sum() + lp_e[rows, self.y].sum())
            cot[self.idx] += self.eps * (np.exp(lp) - self.onehot)
            cot_e = np.zeros_like(logits_e)
            cot_e[self.idx] = -self.eps * (np.exp(lp_e) - self.onehot)
            grad_e = self.program.param_grad(lin_e, {"logits": cot_e})
        else:
            grad_e = 0.0
        grad = self.program.param_grad(lin, {"logits": cot}) + grad_e + lam * diff
        return float(value), grad


def pbrf_finetune(graph: Graph, theta_s: GcnParams, edit: CandidateEdit,
                  config: PbrfConfig = PbrfConfig(), history: list | None = None,
                  adjacency: WeightedAdjacency | None = None) -> GcnParams:
    """Minimize the edge-edit PBRF objective by full-batch gradient descent from theta_s.

    If `history` is a list, the objective value before every step (and at the
    returned point) is appended to it.
    """
    obj = PbrfObjective(graph, theta_s, edit, config, adjacency)
    theta = np.array(theta_s.vector)
    for step in range(config.steps + 1):
        value, grad = obj.value_and_grad(theta)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise TrainingDivergedError(f"non-finite PBRF objective at step {step}")
        if history is not None:
            history.append(value)
        if step == config.steps or np.linalg.norm(grad) <= config.tolerance:
            break
        theta = theta - config.lr * grad
    return theta_s.with_vector(theta)
