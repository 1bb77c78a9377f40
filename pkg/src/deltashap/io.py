"""Artifact writers: CSV with 17 significant digits, JSON, run manifests."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .errors import DataError, InputFileNotFound
from .estimators import ValuationResult


def fmt(value) -> str:
    """CSV cell text; floats carry 17 significant digits."""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, ".17g")
    if isinstance(value, np.integer):
        return str(int(value))
    return "" if value is None else str(value)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: str | Path, payload: dict) -> None:
    # Python floats serialize via repr, which round-trips exactly
    Path(path).write_text(json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputFileNotFound(f"no such file: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from None


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> int:
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
            count += 1
    return count


def write_dict_rows(path: str | Path, rows: list[dict], extra: dict | None = None) -> int:
    """Rows sharing one key set, with ``extra`` columns appended to each."""
    extra = extra or {}
    header = list(rows[0].keys()) + list(extra) if rows else list(extra)
    return write_csv(path, header, ([r[k] for k in rows[0]] + list(extra.values()) for r in rows))


def write_values(path: str | Path, result: ValuationResult, dataset_hash: str) -> None:
    write_csv(path, ["point_id", "value", "method", "seed", "dataset_hash"],
              ([p, float(v), result.method, result.seed, dataset_hash] for p, v in zip(result.points, result.values)))


def read_values(path: str | Path) -> tuple[list[int], np.ndarray, dict]:
    """Point ids, values and the first row's remaining columns from a values CSV or result JSON."""
    path = Path(path)
    if not path.is_file():
        raise InputFileNotFound(f"no such file: {path}")
    if path.suffix == ".json":
        d = read_json(path)
        return list(d["points"]), np.asarray(d["values"], dtype=float), d.get("meta", {})
    points, values, info = [], [], {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"point_id", "value"} <= set(reader.fieldnames):
            raise DataError(f"{path} needs point_id and value columns")
        for row in reader:
            try:
                points.append(int(row["point_id"]))
                values.append(float(row["value"]))
            except ValueError:
                raise DataError(f"{path}: bad row {row}") from None
            if not info:
                info = {k: v for k, v in row.items() if k not in ("point_id", "value")}
    return points, np.asarray(values), info


def read_result(path: str | Path) -> ValuationResult:
    return ValuationResult.from_dict(read_json(path))


def manifest(command: str, config: dict, seed: int, dataset_hash: str | None, **extra) -> dict:
    """Reproducibility record; wall-clock data lives only under ``timing``."""
    return {
        "command": command,
        "version": __version__,
        "seed": seed,
        "dataset_hash": dataset_hash,
        "config": config,
        **extra,
        "timing": {"written_at": _dt.datetime.now(_dt.timezone.utc).isoformat()},
    }
