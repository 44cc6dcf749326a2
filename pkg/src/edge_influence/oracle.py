"""Ground-truth edit effects by fine-tuning/retraining, and predicted-vs-actual checks."""

from __future__ import annotations

import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .graph import CandidateEdit, Graph, apply_edit
from .influence import InfluenceEngine
from .metrics import EvalMetric, MetricProgram, evaluate_metric
from .model import GcnParams, init_params
from .solvers import LissaConfig, LissaDivergedError
from .training import PbrfConfig, TrainConfig, pbrf_finetune, retrain_plain

log = logging.getLogger(__name__)


class Method(str, enum.Enum):
    OURS = "ours"
    GIF = "gif"


@dataclass(frozen=True)
class ScatterRecord:
    edit: CandidateEdit
    metric: EvalMetric
    method: Method
    predicted: float
    actual: float

    def __post_init__(self):
        if not (np.isfinite(self.predicted) and np.isfinite(self.actual)):
            raise ValueError(f"non-finite scatter record for {self.edit}")

    def row(self) -> dict:
        return {"u": self.edit.u, "v": self.edit.v, "kind": self.edit.kind.value,
                "metric": self.metric.name, "method": self.method.value,
                "predicted": self.predicted, "actual": self.actual}


SCATTER_COLUMNS = ["u", "v", "kind", "metric", "method", "predicted", "actual"]


class DegenerateCorrelationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# actual influence


def actual_influences_ours(theta_s: GcnParams, graph: Graph, metrics, edit: CandidateEdit,
                           pbrf: PbrfConfig = PbrfConfig(), measure_on: Graph | None = None,
                           baseline: dict | None = None) -> dict:
    """f(theta', G') - f(theta_s, G) per metric, theta' from one PBRF fine-tune.

    Metric internals (hop sets, edge count) are rebuilt on `measure_on`, which
    defaults to the edited graph.
    """
    theta = pbrf_finetune(graph, theta_s, edit, pbrf)
    return _measure(theta, theta_s, graph, metrics, edit, measure_on, baseline)


def _measure(theta, theta_s, graph, metrics, edit, measure_on=None, baseline=None) -> dict:
    edited = apply_edit(graph, edit) if measure_on is None else measure_on
    out = {}
    for m in metrics:
        before = baseline[m] if baseline is not None else evaluate_metric(m, theta_s, graph)
        out[m] = evaluate_metric(m, theta, edited) - before
    return out


def actual_influence_ours(theta_s: GcnParams, graph: Graph, metric: EvalMetric,
                          edit: CandidateEdit, pbrf: PbrfConfig = PbrfConfig(),
                          measure_on: Graph | None = None) -> float:
    return actual_influences_ours(theta_s, graph, [metric], edit, pbrf, measure_on)[metric]


def actual_influences_gif(theta_init: GcnParams, graph: Graph, metrics, edit: CandidateEdit,
                          train_config: TrainConfig = TrainConfig(),
                          theta_star: GcnParams | None = None,
                          baseline: dict | None = None) -> dict:
    """f(theta'', G') - f(theta*, G), theta'' retrained from theta_init on the edited graph.

    theta* is retrained from theta_init on the original graph when not given.
    """
    edited = apply_edit(graph, edit)
    theta = retrain_plain(edited, theta_init, train_config)
    if baseline is None:
        star = theta_star if theta_star is not None else retrain_plain(graph, theta_init,
                                                                        train_config)
        baseline = {m: evaluate_metric(m, star, graph) for m in metrics}
    return {m: evaluate_metric(m, theta, edited) - baseline[m] for m in metrics}


def actual_influence_gif(theta_init: GcnParams, graph: Graph, metric: EvalMetric,
                         edit: CandidateEdit, train_config: TrainConfig = TrainConfig(),
                         theta_star: GcnParams | None = None) -> float:
    return actual_influences_gif(theta_init, graph, [metric], edit, train_config,
                                 theta_star)[metric]


def fixed_structure_actual(theta: GcnParams, graph: Graph, metric: EvalMetric,
                           edit: CandidateEdit, adjacency) -> float:
    """Edited-graph metric with structural constants (hop sets, |E|) kept from `graph`.

    A diagnostic only: it isolates the smooth part of an edit's effect.
    """
    prog = MetricProgram(metric, graph, theta.config, adjacency)
    value = 0.0 if edit.sign > 0 else 1.0
    return prog.value(theta, adjacency.with_pair_weight(edit.pair, value).weights)


# ---------------------------------------------------------------------------
# correlation


def correlation(records) -> dict:
    """Pearson and Spearman over (predicted, actual) pairs."""
    pairs = np.array([(r.predicted, r.actual) for r in records], dtype=np.float64)
    n = len(pairs)
    if n < 3:
        raise ValueError(f"insufficient n: need at least 3 records, got {n}")
    pred, act = pairs[:, 0], pairs[:, 1]
    if np.ptp(pred) == 0 or np.ptp(act) == 0:
        which = "predicted" if np.ptp(pred) == 0 else "actual"
        raise DegenerateCorrelationError(f"{which} values have zero variance over {n} records")
    return {"pearson": float(stats.pearsonr(pred, act)[0]),
            "spearman": float(stats.spearmanr(pred, act)[0]), "n": n}


def summarize(records, runtime_s: float = 0.0) -> dict:
    try:
        out = correlation(records)
    except DegenerateCorrelationError as exc:
        out = {"pearson": None, "spearman": None, "n": len(records), "note": str(exc)}
    except ValueError:
        out = {"pearson": None, "spearman": None, "n": len(records), "note": "insufficient n"}
    out["runtime_s"] = round(float(runtime_s), 3)
    return out


# ---------------------------------------------------------------------------
# verification run


@dataclass(frozen=True)
class VerifyConfig:
    lissa: LissaConfig = LissaConfig()
    pbrf: PbrfConfig = PbrfConfig()
    train: TrainConfig = TrainConfig()
    methods: tuple = (Method.OURS, Method.GIF)
    workers: int = 1
    fixed_structure: bool = False  # also record the fixed-structure diagnostic


@dataclass
class VerifyResult:
    records: list = field(default_factory=list)
    breakdowns: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def select(self, method: Method, metric: EvalMetric) -> list:
        return [r for r in self.records if r.method is method and r.metric == metric]


def _pool_map(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def verify_run(theta_s: GcnParams, graph: Graph, metrics, edits,
               config: VerifyConfig = VerifyConfig(),
               theta_init: GcnParams | None = None) -> VerifyResult:
    """Predicted vs actual influence for every (metric, edit) and method.

    Ours is checked against PBRF fine-tuning from theta_s; GIF against plain
    retraining from theta_init (by default the seeded initialization that
    produced theta_s). Failed oracle runs are skipped and listed in
    `failures`.
    """
    metrics, edits = list(metrics), list(edits)
    res = VerifyResult()
    for m in metrics:
        for method in config.methods:
            res.summary[f"{method.value}/{m.name}"] = summarize([])
    if not edits or not metrics:
        return res
    theta_init = theta_init if theta_init is not None else init_params(theta_s.config)
    baseline = {m: evaluate_metric(m, theta_s, graph) for m in metrics}
    engine = InfluenceEngine(theta_s, graph, edits, config.lissa)

    timings = {}
    t0 = time.perf_counter()
    ours = engine.scan(metrics, edits, config.workers)
    by_key = {(b.metric, b.edit): b for b in ours}
    timings[Method.OURS] = time.perf_counter() - t0
    gif = {}
    methods = list(config.methods)
    if Method.GIF in methods:
        t0 = time.perf_counter()
        try:
            gif = {(m, e): engine.gif(m, e) for m in metrics for e in edits}
        except LissaDivergedError as exc:
            res.failures.append({"method": Method.GIF.value, "stage": "predict",
                                 "error": f"{type(exc).__name__}: {exc}"})
            methods.remove(Method.GIF)
        timings[Method.GIF] = time.perf_counter() - t0

    fixed = {}

    def run_ours(edit):
        try:
            theta = pbrf_finetune(graph, theta_s, edit, config.pbrf)
        except Exception as exc:  # noqa: BLE001 - recorded in the failure manifest
            return exc
        if config.fixed_structure:
            fixed[edit] = {m: fixed_structure_actual(theta, graph, m, edit, engine.adjacency)
                           - baseline[m] for m in metrics}
        return _measure(theta, theta_s, graph, metrics, edit, baseline=baseline)

    def run_gif(edit):
        try:
            return actual_influences_gif(theta_init, graph, metrics, edit, config.train,
                                         baseline=baseline)
        except Exception as exc:  # noqa: BLE001
            return exc

    actual = {}
    for method, fn in ((Method.OURS, run_ours), (Method.GIF, run_gif)):
        if method not in methods:
            continue
        t0 = time.perf_counter()
        actual[method] = _pool_map(fn, edits, config.workers)
        timings[method] = timings.get(method, 0.0) + time.perf_counter() - t0

    for m in metrics:
        for method in methods:
            for edit, act in zip(edits, actual[method]):
                if isinstance(act, Exception):
                    if m is metrics[0]:
                        res.failures.append({"u": edit.u, "v": edit.v, "kind": edit.kind.value,
                                             "method": method.value, "stage": "oracle",
                                             "error": f"{type(act).__name__}: {act}"})
                    continue
                pred = by_key[(m, edit)].total if method is Method.OURS else gif[(m, edit)]
                res.records.append(ScatterRecord(edit, m, method, pred, act[m]))
    res.breakdowns = ours
    for m in metrics:
        for method in config.methods:
            recs = res.select(method, m)
            res.summary[f"{method.value}/{m.name}"] = summarize(
                recs, timings.get(method, 0.0) / len(metrics))

    diag = {"lissa": engine.diagnostics.as_dict()}
    if config.fixed_structure:
        diag["fixed_structure"] = {}
        for m in metrics:
            recs = [ScatterRecord(e, m, Method.OURS, by_key[(m, e)].total, fixed[e][m])
                    for e in edits if e in fixed]
            summ = summarize(recs)
            summ.pop("runtime_s")
            diag["fixed_structure"][m.name] = summ
    res.diagnostics = diag
    return res

