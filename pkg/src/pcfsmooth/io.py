"""CSV and JSON emission.  Output is deterministic: fixed float formatting, sorted keys."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .fractal import VertexTable

FLOAT_FMT = "{:.17g}"


def _fmt(x) -> str:
    return FLOAT_FMT.format(float(x))


def write_grid_csv(path: str | Path, table: VertexTable, values: np.ndarray, name: str = "value") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = table.points.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["vertex_id"] + [f"x{i}" for i in range(d)] + [name])
        for vid in range(table.n):
            w.writerow([vid] + [_fmt(c) for c in table.points[vid]] + [_fmt(values[vid])])
    return path


def read_grid_csv(path: str | Path, table: VertexTable) -> np.ndarray:
    """Values from a CSV written by :func:`write_grid_csv`; rows are matched by vertex_id."""
    out = np.full(table.n, np.nan)
    with Path(path).open() as fh:
        reader = csv.reader(fh)
        header = next(reader)
        col = len(header) - 1
        for row in reader:
            vid = int(row[0])
            if not 0 <= vid < table.n:
                raise ValueError(f"vertex id {vid} outside the level-{table.level} table")
            out[vid] = float(row[col])
    if np.isnan(out).any():
        raise ValueError(f"{int(np.isnan(out).sum())} vertices missing from {path}")
    return out


def write_rows_csv(path: str | Path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            return None if np.isnan(x) else ("inf" if x > 0 else "-inf")
        return x
    return obj


def write_json(path: str | Path, data: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
