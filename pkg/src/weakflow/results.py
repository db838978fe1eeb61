"""Writing result bundles: CSV tables, summary.json and the resolved config."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

TABLE_FILES = {"estimates": "estimates.csv", "sweep": "sweep.csv"}


def _clean(value):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python ones."""
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_results(bundle, directory) -> list[Path]:
    """Write every table plus summary.json and config_echo.cfg; returns the paths."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create result directory {out}: {err}") from err
    h = bundle.config.config_hash
    written = []
    for name, table in bundle.tables.items():
        path = out / TABLE_FILES.get(name, f"{name}.csv")
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(table.columns) + ["config_hash"])
            for row in table.rows:
                w.writerow([int(v) if isinstance(v, bool) else v for v in row] + [h])
        written.append(path)
    summary = dict(bundle.metadata)
    summary["passed"] = bundle.passed
    summary["checks"] = [c.as_dict() for c in bundle.checks]
    path = out / "summary.json"
    path.write_text(json.dumps(_clean(summary), indent=2) + "\n", encoding="utf-8")
    written.append(path)
    path = out / "config_echo.cfg"
    path.write_text(bundle.config.echo(), encoding="utf-8")
    written.append(path)
    return written
