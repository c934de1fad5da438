"""Area-level CSV datasets.

A dataset file is UTF-8 CSV with the mandatory header ``area_id,y,n,x1,...,xq``
(covariate columns may carry any names).  For Fay-Herriot data the ``n``
column holds ``1 / D``, the reciprocal of the known sampling variance; for
the count families it is the exposure (Poisson) or number of trials
(binomial), with ``n * y`` an integer count.  Reals are written with 17
significant digits so that write-then-read is the identity.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .family import AreaData, DataError, FamilyKind, get_family

REQUIRED = ("area_id", "y", "n")


def _real(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {row}: column {col!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {row}: column {col!r} must be finite, got {text!r}")
    return v


def read_dataset(path, kind: FamilyKind | str | None = None) -> AreaData:
    """Load a dataset file; rows are numbered from 1 after the header in errors.

    When ``kind`` is given every row is checked against that family's
    support (positive n, integer counts, count <= n for binomial data).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file (a header row is required)")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:3]) != REQUIRED:
        raise DataError(f"{path}: header must start with area_id,y,n (got {','.join(header[:3])})")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    kind = get_family(kind) if kind is not None else None
    ids, ys, ns, xs = [], [], [], []
    seen = {}
    for i, rec in enumerate(rows[1:], start=1):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != len(header):
            raise DataError(f"row {i}: expected {len(header)} fields, found {len(rec)}")
        aid = rec[0].strip()
        if not aid:
            raise DataError(f"row {i}: empty area_id")
        if aid in seen:
            raise DataError(f"row {i}: duplicate area_id {aid!r} (first seen in row {seen[aid]})")
        seen[aid] = i
        y = _real(rec[1], i, "y")
        n = _real(rec[2], i, "n")
        x = [_real(c, i, header[3 + j]) for j, c in enumerate(rec[3:])]
        if kind is not None:
            try:
                kind.validate(np.array([y]), np.array([n]))
            except DataError as exc:
                raise DataError(f"row {i}: {exc}") from None
        ids.append(aid)
        ys.append(y)
        ns.append(n)
        xs.append(x)
    if not ids:
        raise DataError(f"{path}: no data rows")
    X = np.array(xs, dtype=float).reshape(len(ids), len(header) - 3)
    return AreaData(np.array(ys), np.array(ns), X, ids, header[3:])


def write_dataset(path, data: AreaData):
    """Write ``data`` in the dataset schema (x columns as stored, no intercept added)."""
    names = list(data.covariate_names) if data.q else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(REQUIRED) + names)
        for i in range(data.m):
            w.writerow([data.area_ids[i], f"{data.y[i]:.17g}", f"{data.n[i]:.17g}"]
                       + [f"{v:.17g}" for v in data.X[i]])


def with_intercept(data: AreaData) -> AreaData:
    """Prepend a column of ones named ``intercept`` to the covariates."""
    X = np.column_stack([np.ones(data.m), data.X]) if data.q else np.ones((data.m, 1))
    return AreaData(data.y, data.n, X, list(data.area_ids),
                    ["intercept"] + list(data.covariate_names[:data.q]))
