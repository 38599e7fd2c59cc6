"""CSV reports, manifests and run records."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

from .nifti import atomic_write

EVAL_COLUMNS = ("case_id", "dice", "tp", "fp", "fn", "precision", "recall", "f1")
FOLD_COLUMNS = ("case_id", "fold")


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form
    return str(value)


def write_csv(path, columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    atomic_write(path, buf.getvalue().encode())


def read_csv(path, required=()):
    """Rows of a CSV file as dicts; checks that ``required`` columns exist."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        return list(reader)


def resolve(base, value):
    """Interpret a manifest path relative to the manifest's directory."""
    p = Path(value)
    return p if p.is_absolute() else Path(base).parent / p


def evaluation_rows(report):
    for r in report.cases:
        yield {"case_id": r.case_id, **r.metrics.as_dict()}
    for subset, agg in report.aggregates.items():
        yield {"case_id": f"mean[{subset}]", **agg}


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_record_path(output):
    output = Path(output)
    return output / "run.json" if output.is_dir() else output.with_name(output.name + ".run.json")


def write_run_record(output, record):
    """Store the run record (config, version, digests) beside ``output``."""
    path = run_record_path(output)
    atomic_write(path, (json.dumps(record, indent=2, sort_keys=True) + "\n").encode())
    return path
