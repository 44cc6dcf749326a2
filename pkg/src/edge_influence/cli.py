"""edge-influence command line.

Subcommands: gen, train, influence, verify, attack, score-edits, homophily.
Errors are printed to stderr as one JSON object; the exit status tells the
failure class apart (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from . import apps
from .graph import Barbell, SBM, GraphError, generate_graph, load_graph, save_graph
from .influence import INFLUENCE_COLUMNS, InfluenceEngine, independence_report, sample_candidates
from .metrics import ALL_METRICS, EvalMetric, MetricKind
from .model import GcnConfig, load_checkpoint, save_checkpoint
from .oracle import SCATTER_COLUMNS, Method, VerifyConfig, verify_run
from .reports import (CsvTable, EditListFormatError, ReportError, edit_rows, emit_reports,
                      read_edit_list)
from .solvers import LissaConfig, LissaDivergedError
from .training import PbrfConfig, TrainConfig, TrainingDivergedError, train

log = logging.getLogger("edge_influence")

EXIT_CODES = {
    "usage": 2,
    "missing-file": 3,
    "schema": 4,
    "numerical": 5,
    "io": 6,
    "internal": 1,
}


class UsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# flag groups


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


METRIC_CHOICES = [k.value for k in MetricKind] + ["all"]


def _add_common(p, model=True):
    p.add_argument("--graph", required=True, help="graph bundle (JSON)")
    if model:
        p.add_argument("--model", required=True, help="model checkpoint from `train`")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True, help="output directory")


def _add_candidates(p, metric_default="all"):
    p.add_argument("--metric", choices=METRIC_CHOICES, default=metric_default)
    p.add_argument("--edits", help="u,v,kind CSV of edits to score (instead of sampling)")
    p.add_argument("--kinds", choices=["delete", "insert", "both"], default="both")
    p.add_argument("--sample", type=_positive_int, default=10000,
                   help="candidates sampled per kind")


def _add_lissa(p):
    p.add_argument("--lambda", dest="damping", type=_positive_float, default=0.01)
    p.add_argument("--lissa-iters", type=_positive_int, default=10000)
    p.add_argument("--lissa-tol", type=_nonneg_float, default=1e-8)


def _add_training(p):
    p.add_argument("--epochs", type=_nonneg_int, default=2000)
    p.add_argument("--lr", type=_nonneg_float, default=0.03)
    p.add_argument("--weight-decay", type=_nonneg_float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = JsonArgumentParser(prog="edge-influence",
                                description="Single-edge influence on a trained GCN.")
    sub = parser.add_subparsers(dest="command", parser_class=JsonArgumentParser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic graph bundle")
    p.add_argument("--kind", choices=["barbell", "sbm"], required=True)
    p.add_argument("--clique", type=_positive_int, default=5)
    p.add_argument("--bridge", type=_positive_int, default=1)
    p.add_argument("--sizes", default="30,30,30", help="SBM block sizes")
    p.add_argument("--p-in", type=float, default=0.3)
    p.add_argument("--p-out", type=float, default=0.02)
    p.add_argument("--noise", type=_nonneg_float, default=None, help="feature noise std")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output graph bundle path")

    p = sub.add_parser("train", help="train a GCN on a graph")
    _add_common(p, model=False)
    _add_training(p)
    p.add_argument("--hidden", type=_positive_int, default=32)
    p.add_argument("--layers", type=_positive_int, default=4)

    p = sub.add_parser("influence", help="predict influence of candidate edits")
    _add_common(p)
    _add_candidates(p)
    _add_lissa(p)

    p = sub.add_parser("verify", help="compare predictions against retraining oracles")
    _add_common(p)
    _add_candidates(p)
    _add_lissa(p)
    _add_training(p)
    p.add_argument("--pbrf-steps", type=_positive_int, default=500)
    p.add_argument("--pbrf-lr", type=_positive_float, default=0.03)
    p.add_argument("--methods", choices=["both", "ours", "gif"], default="both")

    p = sub.add_parser("attack", help="select edits by predicted influence")
    _add_common(p)
    _add_candidates(p, metric_default="val-loss")
    _add_lissa(p)
    p.add_argument("--budget", type=_positive_int, default=10)
    p.add_argument("--objective", choices=["attack", "improve"], default="attack")

    p = sub.add_parser("score-edits", help="score an external rewiring trace")
    _add_common(p)
    p.add_argument("--edits", required=True, help="u,v,kind CSV")
    p.add_argument("--metric", choices=METRIC_CHOICES, default="all")
    _add_lissa(p)

    p = sub.add_parser("homophily", help="mean influence by edit kind and edge class")
    _add_common(p)
    _add_candidates(p)
    _add_lissa(p)
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _metrics(name: str) -> list[EvalMetric]:
    return list(ALL_METRICS) if name == "all" else [EvalMetric.parse(name)]


def _lissa(args) -> LissaConfig:
    return LissaConfig(damping=args.damping, max_iters=args.lissa_iters,
                       tolerance=args.lissa_tol, seed=args.seed)


def _load(args, with_training=False):
    graph = load_graph(args.graph)
    params, training = load_checkpoint(args.model)
    if params.config.in_dim != graph.feature_dim or params.config.num_classes != graph.num_classes:
        raise GraphError(f"model {args.model} does not fit graph {args.graph}")
    return (graph, params, training) if with_training else (graph, params)


def _oracle_training(args, params, training) -> TrainConfig:
    """Retraining config for the GIF oracle: the checkpoint's own, so that
    retraining the unedited graph reproduces the stored model."""
    stored = training.get("config")
    if stored:
        return TrainConfig(**stored)
    return TrainConfig(args.lr, args.weight_decay, args.epochs, params.config.seed)


def _candidates(args, graph):
    if getattr(args, "edits", None):
        return read_edit_list(args.edits)
    return sample_candidates(graph, args.sample, args.kinds, args.seed)


def _influence_table(rows) -> CsvTable:
    return CsvTable(INFLUENCE_COLUMNS, [b.row() for b in rows])


def cmd_gen(args) -> dict:
    if args.kind == "barbell":
        spec = Barbell(args.clique, args.bridge)
        if args.noise is not None:
            spec = Barbell(args.clique, args.bridge, feature_noise=args.noise)
    else:
        sizes = tuple(int(s) for s in args.sizes.split(","))
        spec = SBM(sizes, args.p_in, args.p_out)
        if args.noise is not None:
            spec = SBM(sizes, args.p_in, args.p_out, feature_noise=args.noise)
    graph = generate_graph(spec, args.seed)
    save_graph(graph, args.out)
    return {"nodes": graph.num_nodes, "edges": graph.num_edges, "out": args.out}


def cmd_train(args) -> dict:
    graph = load_graph(args.graph)
    cfg = GcnConfig.for_graph(graph, hidden=args.hidden, layers=args.layers, seed=args.seed)
    tcfg = TrainConfig(args.lr, args.weight_decay, args.epochs, args.seed)
    params, hist = train(graph, cfg, tcfg)
    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.json")
    save_checkpoint(model_path, params, {"config": asdict(tcfg), "final": hist.final()})
    rows = [{"epoch": i, "train_loss": a, "val_loss": b, "val_acc": c}
            for i, (a, b, c) in enumerate(zip(hist.train_loss, hist.val_loss, hist.val_acc))]
    emit_reports({"history.csv": CsvTable(["epoch", "train_loss", "val_loss", "val_acc"], rows),
                  "training.json": {"config": asdict(tcfg), "final": hist.final()}}, args.out)
    return {"model": model_path, **hist.final()}


def cmd_influence(args) -> dict:
    graph, params = _load(args)
    edits = _candidates(args, graph)
    metrics = _metrics(args.metric)
    engine = InfluenceEngine(params, graph, edits, _lissa(args))
    table = engine.scan(metrics, edits, args.workers)
    emit_reports({"influence.csv": _influence_table(table),
                  "diagnostics.json": {"lissa": engine.diagnostics.as_dict(),
                                       "term_correlation": independence_report(table)}},
                 args.out)
    return {"rows": len(table)}


def cmd_verify(args) -> dict:
    graph, params, training = _load(args, with_training=True)
    edits = _candidates(args, graph)
    metrics = _metrics(args.metric)
    methods = {"both": (Method.OURS, Method.GIF), "ours": (Method.OURS,),
               "gif": (Method.GIF,)}[args.methods]
    cfg = VerifyConfig(
        lissa=_lissa(args),
        pbrf=PbrfConfig(damping=args.damping, steps=args.pbrf_steps, lr=args.pbrf_lr),
        train=_oracle_training(args, params, training),
        methods=methods, workers=args.workers)
    res = verify_run(params, graph, metrics, edits, cfg)
    emit_reports({
        "scatter.csv": CsvTable(SCATTER_COLUMNS, [r.row() for r in res.records]),
        "influence.csv": _influence_table(res.breakdowns),
        "summary.json": res.summary,
        "failures.json": res.failures,
        "diagnostics.json": res.diagnostics,
    }, args.out)
    return {"records": len(res.records), "failures": len(res.failures)}


def cmd_attack(args) -> dict:
    graph, params = _load(args)
    edits = _candidates(args, graph)
    metric = _metrics(args.metric)[0] if args.metric != "all" else ALL_METRICS[0]
    engine = InfluenceEngine(params, graph, edits, _lissa(args))
    table = engine.scan([metric], edits, args.workers)
    if args.objective == "attack":
        plan = apps.attack_select(table, args.budget)
    else:
        plan = apps.improve_select(table, args.budget, metric)
    emit_reports({"plan.csv": CsvTable(apps.PLAN_COLUMNS, plan.rows()),
                  "edits.csv": edit_rows(plan.edits)}, args.out)
    return {"planned": len(plan)}


def cmd_score_edits(args) -> dict:
    graph, params = _load(args)
    edits = read_edit_list(args.edits)
    table, counts = apps.score_edit_list(params, graph, edits, _metrics(args.metric),
                                         _lissa(args))
    emit_reports({"influence.csv": _influence_table(table), "summary.json": counts}, args.out)
    return {"rows": len(table)}


def cmd_homophily(args) -> dict:
    graph, params = _load(args)
    edits = _candidates(args, graph)
    metrics = _metrics(args.metric)
    engine = InfluenceEngine(params, graph, edits, _lissa(args))
    table = engine.scan(metrics, edits, args.workers)
    rows = apps.homophily_summary(table, graph)
    emit_reports({"homophily.csv": CsvTable(apps.HOMOPHILY_COLUMNS, rows),
                  "influence.csv": _influence_table(table)}, args.out)
    return {"cells": len(rows)}


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "influence": cmd_influence, "verify": cmd_verify,
    "attack": cmd_attack, "score-edits": cmd_score_edits, "homophily": cmd_homophily,
}


def _configure_logging():
    level = os.environ.get("EDGE_INFLUENCE_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _fail(kind: str, exc: BaseException) -> int:
    code = EXIT_CODES[kind]
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc),
                      "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc)
    try:
        result = COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        return _fail("missing-file", exc)
    except (GraphError, EditListFormatError, apps.EditListError, ValueError, KeyError) as exc:
        return _fail("schema", exc)
    except (TrainingDivergedError, LissaDivergedError, ArithmeticError) as exc:
        return _fail("numerical", exc)
    except (ReportError, OSError) as exc:
        return _fail("io", exc)
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
