"""CSV ingestion and export of curve samples.

Long format, one observation per row, with a header naming at least
``curve_id``, ``x`` and ``y``. An optional ``sample_id`` column splits the
rows into independent samples; an optional numeric ``time`` column orders
the curves (otherwise the order of first appearance is used).
"""
from __future__ import annotations

import csv
import math
from collections import OrderedDict
from pathlib import Path

import numpy as np

from relsn.errors import DomainError
from relsn.spline_core import FunctionalSample

REQUIRED = ("curve_id", "x", "y")
DEFAULT_SAMPLE = "1"


def _float(value: str, column: str, line: int, path) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise DomainError(f"{path}:{line}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise DomainError(f"{path}:{line}: column {column!r} is not finite: {value!r}")
    return v


def read_curves(path, rescale: bool = False) -> "OrderedDict[str, FunctionalSample]":
    """Samples of a long-format CSV file, keyed by ``sample_id`` in order of appearance.

    With ``rescale`` the design points of all samples are mapped jointly to
    ``[0, 1]`` by ``(x - min) / (max - min)``; without it, points outside
    ``[0, 1]`` are an error.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DomainError(f"{path}: empty file; a header row is required") from None
        missing = [c for c in REQUIRED if c not in header]
        if missing:
            raise DomainError(f"{path}:1: header lacks column(s) {', '.join(missing)}")
        col = {name: header.index(name) for name in header}
        has_sample = "sample_id" in col
        has_time = "time" in col
        samples: OrderedDict = OrderedDict()
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DomainError(
                    f"{path}:{line}: expected {len(header)} fields, found {len(row)}"
                )
            sid = row[col["sample_id"]].strip() if has_sample else DEFAULT_SAMPLE
            cid = row[col["curve_id"]].strip()
            if not cid:
                raise DomainError(f"{path}:{line}: empty curve_id")
            x = _float(row[col["x"]], "x", line, path)
            y = _float(row[col["y"]], "y", line, path)
            if not rescale and not 0.0 <= x <= 1.0:
                raise DomainError(
                    f"{path}:{line}: x = {x} outside [0, 1]; pass the rescale option to map x to [0, 1]"
                )
            curves = samples.setdefault(sid, OrderedDict())
            entry = curves.get(cid)
            if entry is None:
                t = _float(row[col["time"]], "time", line, path) if has_time else None
                entry = curves[cid] = {"time": t, "x": [], "y": []}
            elif has_time:
                t = _float(row[col["time"]], "time", line, path)
                if t != entry["time"]:
                    raise DomainError(f"{path}:{line}: curve {cid!r} has more than one time value")
            entry["x"].append(x)
            entry["y"].append(y)
    if not samples:
        raise DomainError(f"{path}: no data rows")
    if rescale:
        xs = np.concatenate([np.asarray(c["x"]) for s in samples.values() for c in s.values()])
        lo, hi = float(xs.min()), float(xs.max())
        if not hi > lo:
            raise DomainError(f"{path}: cannot rescale, all x values equal {lo}")
    out = OrderedDict()
    for sid, curves in samples.items():
        items = list(curves.values())
        if has_time:
            items.sort(key=lambda c: c["time"])
        xs = [np.asarray(c["x"], dtype=float) for c in items]
        if rescale:
            xs = [np.clip((x - lo) / (hi - lo), 0.0, 1.0) for x in xs]
        ys = [np.asarray(c["y"], dtype=float) for c in items]
        out[sid] = FunctionalSample.from_curves(zip(xs, ys))
    return out


def read_sample(path, rescale: bool = False) -> FunctionalSample:
    """The single sample of a CSV file (error if it holds several)."""
    samples = read_curves(path, rescale)
    if len(samples) != 1:
        raise DomainError(f"{path}: expected one sample, found {len(samples)} sample_id values")
    return next(iter(samples.values()))


def write_curves(path, samples) -> None:
    """Write one sample, or a mapping ``sample_id -> sample``, in long format.

    Values are written with ``repr`` so that reading them back is exact.
    """
    if isinstance(samples, FunctionalSample):
        samples = {None: samples}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        multi = list(samples) != [None]
        w.writerow(["curve_id", "x", "y", *(["sample_id"] if multi else [])])
        for sid, s in samples.items():
            ids = s.curve_ids + 1
            for cid, x, y in zip(ids.tolist(), s.x.tolist(), s.y.tolist()):
                w.writerow([cid, repr(x), repr(y), *([sid] if multi else [])])


def reshape_wide(src, dst, id_column: str | None = None) -> int:
    """Convert a wide table (one curve per row, columns headed by grid x) to long format.

    The first column (or ``id_column``) names the curve; every other header
    must be numeric and is used as the design point. Empty cells are
    skipped. Returns the number of curves written.
    """
    with open(src, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DomainError(f"{src}: empty file") from None
        id_idx = header.index(id_column) if id_column is not None else 0
        grid = {}
        for j, h in enumerate(header):
            if j != id_idx:
                grid[j] = _float(h, f"header[{j}]", 1, src)
        n = 0
        with open(dst, "w", newline="") as out:
            w = csv.writer(out, lineterminator="\n")
            w.writerow(["curve_id", "x", "y"])
            for line, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DomainError(f"{src}:{line}: expected {len(header)} fields, found {len(row)}")
                cid = row[id_idx].strip()
                wrote = False
                for j, x in grid.items():
                    if row[j].strip() == "":
                        continue
                    y = _float(row[j], header[j], line, src)
                    w.writerow([cid, repr(x), repr(y)])
                    wrote = True
                n += wrote
    return n


def read_baseline(path):
    """Hypothesized mean ``m0`` from a CSV with columns ``x`` and ``y``.

    The returned function interpolates linearly between the given points
    and is constant beyond them.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
            raise DomainError(f"{path}:1: baseline file needs columns x and y")
        pts = [(_float(r["x"], "x", i, path), _float(r["y"], "y", i, path))
               for i, r in enumerate(reader, start=2)]
    if not pts:
        raise DomainError(f"{path}: baseline file has no rows")
    pts.sort()
    bx = np.array([p[0] for p in pts])
    by = np.array([p[1] for p in pts])
    if np.any(np.diff(bx) == 0):
        raise DomainError(f"{path}: baseline x values must be distinct")
    return lambda x: np.interp(x, bx, by)
