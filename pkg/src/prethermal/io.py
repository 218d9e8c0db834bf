"""Deterministic CSV and JSON output helpers."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def fmt(x) -> str:
    """Format a table cell; floats get 17 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Comma-separated table with a header row and LF line endings."""
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(fmt(v) for v in r))
    return "\n".join(lines) + "\n"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(csv_text(header, rows).encode())
    return path


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def dumps(obj, indent: int | None = 2) -> str:
    return json.dumps(obj, indent=indent, sort_keys=True, default=_default)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj) + "\n")
    return path


def config_hash(cfg) -> str:
    """SHA-256 of the canonical JSON form of a configuration mapping."""
    return hashlib.sha256(dumps(cfg, indent=None).encode()).hexdigest()
