"""CSV readers and writers for shards, predictions, posteriors and truth.

Reals are written with 17 significant digits so that reading a file back
reproduces every binary64 value exactly.
"""
from __future__ import annotations

import csv
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ParseError
from .model import GaussianState
from .numerics import SymMatrix
from .worker import COORD_DECIMALS, ServerData, Shard

SHARD_HEADER = ["x", "y", "z", "noise_var"]
SHARD_HEADER_T = ["t"] + SHARD_HEADER
PREDICTION_HEADER = ["x", "y", "mean", "sd"]


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def canonical_coord(v: float) -> float:
    return round(float(v), COORD_DECIMALS)


def _real(text: str, line: int, col: int, name: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(line, col, f"{name} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise ParseError(line, col, f"{name} must be finite, got {text!r}")
    return v


def ingest(path, server_id: int = 1) -> List[Shard]:
    """Read a shard file into one Shard per time step (or one, without a t column).

    Row order is kept; coordinates are rounded to 1e-9.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [Shard.empty(server_id)]
    header = [h.strip() for h in rows[0]]
    if header == SHARD_HEADER_T:
        timed = True
    elif header == SHARD_HEADER:
        timed = False
    else:
        raise ParseError(1, 1, f"header must be {','.join(SHARD_HEADER_T)} "
                               f"or {','.join(SHARD_HEADER)}, got {','.join(header)}")
    groups: Dict[Optional[int], list] = {}
    width = len(header)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != width:
            raise ParseError(lineno, min(len(row), width) + 1,
                             f"expected {width} fields, got {len(row)}")
        t = None
        off = 0
        if timed:
            text = row[0].strip()
            if not text.isdigit() or int(text) < 1:
                raise ParseError(lineno, 1, f"t must be a positive integer, got {text!r}")
            t = int(text)
            off = 1
        x = _real(row[off], lineno, off + 1, "x")
        y = _real(row[off + 1], lineno, off + 2, "y")
        z = _real(row[off + 2], lineno, off + 3, "z")
        v = _real(row[off + 3], lineno, off + 4, "noise_var")
        if not v > 0:
            raise ParseError(lineno, off + 4, f"noise_var must be positive, got {row[off + 3]!r}")
        groups.setdefault(t, []).append((canonical_coord(x), canonical_coord(y), z, v))
    if not groups:
        return [Shard.empty(server_id)]
    return [Shard.from_measurements(server_id, groups[t], t)
            for t in sorted(groups, key=lambda k: -1 if k is None else k)]


def ingest_server(path, server_id: int) -> ServerData:
    return ServerData(server_id, ingest(path, server_id))


def write_shards(path, shards: Sequence[Shard]):
    """Write shards to one file; a t column is added when any shard is timed."""
    timed = any(s.time_index is not None for s in shards)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SHARD_HEADER_T if timed else SHARD_HEADER)
        for s in shards:
            for m in s.measurements():
                row = [fmt(m.x), fmt(m.y), fmt(m.value), fmt(m.noise_var)]
                w.writerow(([str(s.time_index)] if timed else []) + row)


def write_predictions(path, results: Sequence[Tuple[Optional[int], object]]):
    """``results`` holds (t, PredictionResult) pairs; t None for spatial output."""
    timed = any(t is not None for t, _ in results)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["t"] if timed else []) + PREDICTION_HEADER)
        for t, res in results:
            for (x, y), mu, sd in zip(res.locations, res.mean, res.sd):
                w.writerow(([str(t)] if timed else [])
                           + [fmt(x), fmt(y), fmt(mu), fmt(sd)])


def read_predictions(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_posterior(path, state: GaussianState):
    """Mean and packed precision as rows (kind, i, j, value)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "i", "j", "value"])
        for i, v in enumerate(state.mean):
            w.writerow(["mean", i, "", fmt(v)])
        rows, cols = np.tril_indices(state.dim)
        for i, j, v in zip(rows, cols, state.precision.data):
            w.writerow(["precision", i, j, fmt(v)])


def read_posterior(path) -> GaussianState:
    mean: Dict[int, float] = {}
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                if row["kind"] == "mean":
                    mean[int(row["i"])] = float(row["value"])
                elif row["kind"] == "precision":
                    entries.append((int(row["i"]), int(row["j"]), float(row["value"])))
                else:
                    raise ValueError(f"unknown kind {row['kind']!r}")
            except (KeyError, ValueError) as exc:
                raise ParseError(lineno, 1, str(exc)) from None
    r = len(mean)
    P = np.zeros((r, r))
    for i, j, v in entries:
        P[i, j] = v
    return GaussianState.from_precision(np.array([mean[i] for i in range(r)]),
                                        SymMatrix.from_dense(P))


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]):
    """Generic CSV with reals at full precision."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
