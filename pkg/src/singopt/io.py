"""Deterministic file exports: ensemble CSV, compact binary dumps, JSON.

The binary layout is: four little-endian uint64 header words {num_paths,
num_steps, value_dim, seed}, then the (num_paths, num_steps + 1, value_dim)
values as little-endian float64 in row-major order.  CSV holds one row per
(path, grid point) with full-precision floats.  JSON is written with sorted
keys, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def ensemble_to_csv(values: np.ndarray, knots: np.ndarray, path, prefix: str = "x") -> None:
    """Write an (M, K, D) ensemble as CSV rows (path, step, t, components)."""
    values = np.asarray(values, dtype=float)
    M, K, D = values.shape
    header = "path,step,t," + ",".join(f"{prefix}{i}" for i in range(D))
    lines = [header]
    for i in range(M):
        for j in range(K):
            comps = ",".join(repr(float(v)) for v in values[i, j])
            lines.append(f"{i},{j},{knots[j]!r},{comps}")
    Path(path).write_text("\n".join(lines) + "\n")


def ensemble_to_binary(values: np.ndarray, seed, path) -> None:
    """Write an (M, K, D) ensemble in the documented binary layout."""
    values = np.ascontiguousarray(values, dtype="<f8")
    M, K, D = values.shape
    if not isinstance(seed, (int, np.integer)):
        raise TypeError("binary export requires an integer seed in the header")
    header = np.array([M, K - 1, D, int(seed)], dtype="<u8")
    Path(path).write_bytes(header.tobytes() + values.tobytes())


def ensemble_from_binary(path):
    """Read a binary ensemble dump back; returns (values, seed)."""
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[:32], dtype="<u8")
    M, N, D, seed = (int(v) for v in header)
    values = np.frombuffer(raw[32:], dtype="<f8").reshape(M, N + 1, D)
    return values, seed


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
