"""CSV/JSON artifacts, edit-list input and the hashed manifest."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .graph import CandidateEdit, EditKind, GraphError


class ReportError(OSError):
    pass


class EditListFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CsvTable:
    columns: list
    rows: list  # dicts keyed by column


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def write_csv(path, table: CsvTable) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=table.columns, lineterminator="\n")
            w.writeheader()
            for row in table.rows:
                w.writerow({k: _fmt(row[k]) for k in table.columns})
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k != "runtime_s"}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def emit_reports(results: dict, out_dir) -> dict:
    """Write every artifact in `results` (name -> CsvTable or JSON-able object)
    into `out_dir` and a manifest.json listing each with its sha256.

    JSON artifacts that carry wall-clock `runtime_s` fields also get a
    `content_sha256` computed without them, which is stable across reruns.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc.strerror or exc}") from exc
    entries = []
    for name in sorted(results):
        obj = results[name]
        path = out / name
        if isinstance(obj, CsvTable):
            write_csv(path, obj)
        else:
            write_json(path, obj)
        entry = {"path": name, "sha256": _sha256(path.read_bytes())}
        if not isinstance(obj, CsvTable):
            stripped = json.dumps(_strip_timing(obj), indent=2, sort_keys=True) + "\n"
            entry["content_sha256"] = _sha256(stripped.encode())
        entries.append(entry)
    manifest = {"artifacts": entries}
    write_json(out / "manifest.json", manifest)
    return manifest


def read_edit_list(path) -> list[CandidateEdit]:
    """Read a u,v,kind CSV (header required)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read edit list {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.DictReader(fh)
        missing = {"u", "v", "kind"} - set(reader.fieldnames or [])
        if missing:
            raise EditListFormatError(f"{path}: missing columns {sorted(missing)}")
        edits = []
        for row_no, row in enumerate(reader, start=1):
            try:
                edits.append(CandidateEdit(int(row["u"]), int(row["v"]),
                                           EditKind(row["kind"].strip().lower())))
            except (ValueError, TypeError, GraphError) as exc:
                raise EditListFormatError(f"{path}: row {row_no}: {exc}") from None
    return edits


def edit_rows(edits) -> CsvTable:
    return CsvTable(["u", "v", "kind"],
                    [{"u": e.u, "v": e.v, "kind": e.kind.value} for e in edits])
