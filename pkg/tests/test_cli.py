import csv
import hashlib
import json

import pytest

from edge_influence.cli import EXIT_CODES, _oracle_training, build_parser, main
from edge_influence.model import load_checkpoint


def _run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    g = d / "g.json"
    assert _run("gen", "--kind", "barbell", "--clique", 4, "--seed", 1, "--out", g) == 0
    assert _run("train", "--graph", g, "--epochs", 200, "--hidden", 8, "--layers", 2,
                "--out", d / "m") == 0
    return d, g, d / "m" / "model.json"


def test_train_outputs(trained):
    d, _, model = trained
    assert model.exists()
    hist = _rows(d / "m" / "history.csv")
    assert len(hist) == 200 and list(hist[0]) == ["epoch", "train_loss", "val_loss", "val_acc"]


def test_influence_manifest_and_determinism(trained):
    d, g, model = trained
    outs = []
    for name in ("i1", "i2"):
        assert _run("influence", "--graph", g, "--model", model, "--sample", 3,
                    "--workers", 1, "--lissa-tol", 1e-6, "--out", d / name) == 0
        outs.append(json.loads((d / name / "manifest.json").read_text()))
    rows = _rows(d / "i1" / "influence.csv")
    assert len(rows) == 3 * 2 * 3  # 3 per kind, 2 kinds, 3 metrics
    for entry in outs[0]["artifacts"]:
        data = (d / "i1" / entry["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == entry["sha256"]
    csv_hashes = [[e["sha256"] for e in m["artifacts"] if e["path"].endswith(".csv")]
                  for m in outs]
    assert csv_hashes[0] == csv_hashes[1]


def test_verify_attack_score_homophily(trained):
    d, g, model = trained
    assert _run("verify", "--graph", g, "--model", model, "--sample", 2, "--metric",
                "val-loss", "--methods", "ours", "--pbrf-steps", 5, "--lissa-tol", 1e-6,
                "--out", d / "v") == 0
    assert len(_rows(d / "v" / "scatter.csv")) == 4
    summary = json.loads((d / "v" / "summary.json").read_text())
    assert summary["ours/val-loss"]["n"] == 4

    assert _run("attack", "--graph", g, "--model", model, "--sample", 4, "--budget", 2,
                "--metric", "val-loss", "--lissa-tol", 1e-6, "--out", d / "a") == 0
    plan = _rows(d / "a" / "plan.csv")
    assert len(plan) == 2 and float(plan[0]["total"]) >= float(plan[1]["total"])

    assert _run("score-edits", "--graph", g, "--model", model, "--edits",
                d / "a" / "edits.csv", "--metric", "dirichlet", "--lissa-tol", 1e-6,
                "--out", d / "s") == 0
    counts = json.loads((d / "s" / "summary.json").read_text())
    assert sum(counts["dirichlet"].values()) == 2

    assert _run("homophily", "--graph", g, "--model", model, "--sample", 3,
                "--lissa-tol", 1e-6, "--out", d / "h") == 0
    assert _rows(d / "h" / "homophily.csv")


def test_exit_codes(trained, tmp_path, capsys):
    d, g, model = trained
    assert _run("influence", "--graph", g) == EXIT_CODES["usage"]
    assert _run("bogus") == EXIT_CODES["usage"]
    assert _run("influence", "--graph", tmp_path / "none.json", "--model", model,
                "--out", tmp_path / "o") == EXIT_CODES["missing-file"]
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "missing-file" and err["exit_code"] == 3

    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert _run("score-edits", "--graph", g, "--model", model, "--edits", bad,
                "--out", tmp_path / "o") == EXIT_CODES["schema"]
    existing = tmp_path / "existing.csv"
    existing.write_text("u,v,kind\n0,1,insert\n")
    assert _run("score-edits", "--graph", g, "--model", model, "--edits", existing,
                "--out", tmp_path / "o") == EXIT_CODES["schema"]
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    assert _run("train", "--graph", broken, "--out", tmp_path / "o") == EXIT_CODES["schema"]


def test_gif_oracle_reuses_checkpoint_training(trained):
    _, g, model = trained
    params, training = load_checkpoint(model)
    args = build_parser().parse_args(["verify", "--graph", str(g), "--model", str(model),
                                      "--out", "x"])
    cfg = _oracle_training(args, params, training)
    assert cfg.epochs == 200 and args.epochs == 2000
    assert _oracle_training(args, params, {}).epochs == 2000
