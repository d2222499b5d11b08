"""CSV/JSON output with a provenance line, plus small hashing helpers.

Every CSV starts with one comment line::

    # tool=sarmim version=0.1.0 config_hash=<hash> seed=<seed>

followed by a fixed header row.  Read them back with
``pandas.read_csv(path, comment="#")`` or :func:`read_csv`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

import numpy as np

from . import __version__


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(config_hash, seed) -> dict:
    return {"tool": "sarmim", "version": __version__, "config_hash": config_hash, "seed": seed}


def fmt(value):
    if isinstance(value, float):
        return f"{value:.10g}"
    if isinstance(value, (list, tuple)):
        return "x".join(str(v) for v in value)
    return value


def write_csv(path, fieldnames, rows, prov: dict):
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n")
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: fmt(row.get(k)) for k in fieldnames})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_csv(path):
    """Rows of a CSV written by :func:`write_csv` as dicts of strings, plus the provenance dict."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    prov = {}
    if lines and lines[0].startswith("#"):
        prov = dict(item.split("=", 1) for item in lines[0][1:].split())
        lines = lines[1:]
    return list(csv.DictReader(lines)), prov


def write_json(path, payload: dict, prov: dict):
    out = {"provenance": prov}
    out.update(payload)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
