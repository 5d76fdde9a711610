"""Long-format plot data (``series, x, y, ci_lo, ci_hi``) from run reports."""

from __future__ import annotations

import json
from pathlib import Path

from . import io

HEADER = ["series", "x", "y", "ci_lo", "ci_hi"]


def emit_plotdata(reports, out_dir) -> list:
    """One CSV per figure name found in the reports.

    With several reports the series names are prefixed by the run directory
    name so rows stay distinguishable.  An empty report list writes nothing.
    """
    reports = [Path(r) for r in reports]
    if not reports:
        return []
    figures: dict[str, list] = {}
    for path in reports:
        if not path.is_file():
            raise FileNotFoundError(f"missing report {path}")
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        if "plots" not in rep:
            raise ValueError(f"{path} is not a run report")
        prefix = f"{path.parent.name}:" if len(reports) > 1 else ""
        for fig, rows in rep["plots"].items():
            figures.setdefault(fig, []).extend([f"{prefix}{r[0]}", *r[1:]] for r in rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [io.write_csv(out_dir / f"{fig}.csv", HEADER, rows) for fig, rows in sorted(figures.items())]
