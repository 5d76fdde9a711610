"""Deterministic file output: CSV with 17 significant digits, sorted JSON, run manifests."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import math
import os
import platform
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if isinstance(x, str):
        if any(ch in x for ch in ",\n\r\""):
            raise ValueError(f"CSV text field may not contain separators: {x!r}")
        return x
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if x is None:
        return "nan"
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> Path:
    """Write ``rows`` (iterables of str or numbers) under ``header``; ``'\\n'`` line endings."""
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        row = list(row)
        if len(row) != len(header):
            raise ValueError("row length does not match header")
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _parse(cell: str):
    try:
        return float(cell)
    except ValueError:
        return cell


def read_csv(path):
    """Inverse of :func:`write_csv`: ``(header, rows)`` with numeric cells as floats."""
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return [], []
    header = lines[0].split(",")
    return header, [[_parse(c) for c in line.split(",")] for line in lines[1:]]


def _clean(obj):
    # JSON cannot carry nan/inf; encode them as strings so files stay valid and stable
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isfinite(x):
            return x
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import numpy
    import pydantic
    import scipy
    import yaml

    from .. import __version__
    return dict(hydrolevy=__version__, python=platform.python_version(), numpy=numpy.__version__,
                scipy=scipy.__version__, pydantic=pydantic.__version__, pyyaml=yaml.__version__)


def new_run_dir(root, subcommand: str) -> Path:
    """Fresh ``<root>/<subcommand>-<UTC timestamp>`` directory; never reuses an existing one."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    base = root / f"{subcommand}-{stamp}"
    path, n = base, 1
    while True:
        try:
            os.mkdir(path)
            return path
        except FileExistsError:
            path = Path(f"{base}-{n}")
            n += 1
