"""File formats: delimited tables and JSON artifacts.

All numeric columns are serialized with 17 significant digits so a
write-then-read round trip reproduces float64 values exactly. Headers are
mandatory and validated on read.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np


def fmt(x) -> str:
    return format(float(x), ".17g")


def write_table(path, header: list[str], columns: list[np.ndarray]) -> None:
    """Write columns to CSV; integer-typed columns keep plain int formatting."""
    n = len(columns[0])
    if any(len(c) != n for c in columns):
        raise ValueError("columns must share a length")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in range(n):
            row = []
            for c in columns:
                v = c[r]
                row.append(str(int(v)) if np.issubdtype(np.asarray(c).dtype, np.integer) else fmt(v))
            wr.writerow(row)


def read_table(path, expected_header: list[str] | None = None,
               prefix: list[str] | None = None) -> tuple[list[str], np.ndarray]:
    """Read a CSV of numbers; returns (header, (n, ncol) float array)."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        try:
            header = next(rd)
        except StopIteration:
            raise ValueError(f"{path}: empty file, header required") from None
        if expected_header is not None and header != expected_header:
            raise ValueError(
                f"{path}: expected header {expected_header}, got {header}"
            )
        if prefix is not None and header[: len(prefix)] != prefix:
            raise ValueError(
                f"{path}: header must start with {prefix}, got {header}"
            )
        rows = [[float(v) for v in row] for row in rd if row]
    data = np.asarray(rows, dtype=np.float64)
    if data.size == 0:
        data = data.reshape(0, len(header))
    if data.shape[1] != len(header):
        raise ValueError(f"{path}: row width does not match header")
    return header, data


def write_coords(path, coords, ids=None) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    ids = np.arange(len(coords)) if ids is None else np.asarray(ids, dtype=np.int64)
    write_table(path, ["id", "x", "y"], [ids, coords[:, 0], coords[:, 1]])


def read_coords(path) -> tuple[np.ndarray, np.ndarray]:
    _, data = read_table(path, expected_header=["id", "x", "y"])
    return data[:, 0].astype(np.int64), data[:, 1:3]


def write_design(path, design, ids=None) -> None:
    design = np.atleast_2d(np.asarray(design, dtype=np.float64))
    ids = np.arange(len(design)) if ids is None else np.asarray(ids, dtype=np.int64)
    header = ["id"] + [f"x{j}" for j in range(design.shape[1])]
    write_table(path, header, [ids] + [design[:, j] for j in range(design.shape[1])])


def read_design(path) -> tuple[np.ndarray, np.ndarray]:
    header, data = read_table(path, prefix=["id"])
    if header != ["id"] + [f"x{j}" for j in range(len(header) - 1)]:
        raise ValueError(f"{path}: design header must be id,x0,x1,...")
    return data[:, 0].astype(np.int64), data[:, 1:]


def write_response(path, response, ids=None) -> None:
    response = np.asarray(response, dtype=np.float64).ravel()
    ids = np.arange(len(response)) if ids is None else np.asarray(ids, dtype=np.int64)
    write_table(path, ["id", "y"], [ids, response])


def read_response(path) -> tuple[np.ndarray, np.ndarray]:
    _, data = read_table(path, expected_header=["id", "y"])
    return data[:, 0].astype(np.int64), data[:, 1]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
