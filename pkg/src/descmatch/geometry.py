"""Embedding-vector primitives and on-disk feature formats.

All arithmetic is 64-bit; the toolkit targets correctness testing, not
throughput.  ``sim_matrix`` deliberately evaluates the same scalar kernel
as ``cosine_sim`` per entry so that batched and per-pair results are
bit-identical (BLAS gemm reorders the summation and is not).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

NORM_FLOOR = 1e-12


def l2_normalize(matrix: np.ndarray) -> np.ndarray:
    """Divide each row by its L2 norm.  Raises naming the first row whose
    norm falls below the representable floor."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[None, :]
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise ValueError(f"row {bad[0]} has near-zero norm {norms[bad[0]]:.3e}")
    return matrix / norms[:, None]


def _check_dims(u: np.ndarray, v: np.ndarray) -> None:
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of two unit vectors, clamped into [-1, 1] against
    rounding drift."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    _check_dims(u, v)
    return float(min(1.0, max(-1.0, np.dot(u, v))))


def euclid_dist(u: np.ndarray, v: np.ndarray) -> float:
    """Euclidean distance; for unit vectors d^2 = 2 - 2 s."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    _check_dims(u, v)
    return float(np.linalg.norm(u - v))


def sim_matrix(images: np.ndarray, texts: np.ndarray) -> np.ndarray:
    """Entry (i, j) = cosine_sim(image row i, text row j), bit-identical
    to the per-pair calls."""
    images = np.atleast_2d(np.asarray(images, dtype=np.float64))
    texts = np.atleast_2d(np.asarray(texts, dtype=np.float64))
    _check_dims(images, texts)
    out = np.empty((images.shape[0], texts.shape[0]), dtype=np.float64)
    for i in range(images.shape[0]):
        row = images[i]
        for j in range(texts.shape[0]):
            out[i, j] = min(1.0, max(-1.0, np.dot(row, texts[j])))
    return out


# ---------------------------------------------------------------------------
# Feature files: JSON manifest + flat little-endian binary, or JSONL fallback

_DTYPES = {"f32": "<f4", "f64": "<f8"}
_MANIFEST_SUFFIX = ".manifest.json"


def write_features(stem, ids: list[str], matrix: np.ndarray, dtype: str = "f64") -> Path:
    """Write ``<stem>.manifest.json`` and ``<stem>.bin`` (row-major)."""
    if dtype not in _DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}")
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if len(ids) != matrix.shape[0]:
        raise ValueError(f"{len(ids)} ids for {matrix.shape[0]} rows")
    stem = Path(stem)
    manifest = {"rows": matrix.shape[0], "dim": matrix.shape[1], "dtype": dtype, "ids": list(ids)}
    with open(stem.with_name(stem.name + _MANIFEST_SUFFIX), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    matrix.astype(_DTYPES[dtype]).tofile(stem.with_name(stem.name + ".bin"))
    return stem.with_name(stem.name + _MANIFEST_SUFFIX)


def read_features(manifest_path) -> tuple[list[str], np.ndarray]:
    """Load a manifest + binary pair; returns (ids, float64 matrix)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.name.endswith(_MANIFEST_SUFFIX):
        raise ValueError(f"{manifest_path}: expected a *{_MANIFEST_SUFFIX} path")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    rows, dim, dtype = int(manifest["rows"]), int(manifest["dim"]), manifest["dtype"]
    if dtype not in _DTYPES:
        raise ValueError(f"{manifest_path}: unknown dtype {dtype!r}")
    ids = [str(s) for s in manifest["ids"]]
    if len(ids) != rows:
        raise ValueError(f"{manifest_path}: {len(ids)} ids for {rows} rows")
    bin_path = manifest_path.with_name(manifest_path.name[: -len(_MANIFEST_SUFFIX)] + ".bin")
    data = np.fromfile(bin_path, dtype=_DTYPES[dtype])
    if data.size != rows * dim:
        raise ValueError(f"{bin_path}: expected {rows * dim} values, found {data.size}")
    return ids, data.reshape(rows, dim).astype(np.float64)


def write_features_jsonl(path, ids: list[str], matrix: np.ndarray) -> None:
    """Small-set fallback: one {"id", "vec"} record per line."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if len(ids) != matrix.shape[0]:
        raise ValueError(f"{len(ids)} ids for {matrix.shape[0]} rows")
    with open(path, "w", encoding="utf-8") as fh:
        for sid, row in zip(ids, matrix):
            fh.write(json.dumps({"id": sid, "vec": row.tolist()}) + "\n")


def read_features_jsonl(path) -> tuple[list[str], np.ndarray]:
    ids = []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            ids.append(str(obj["id"]))
            rows.append(np.asarray(obj["vec"], dtype=np.float64))
    if not ids:
        raise ValueError(f"{path}: no feature records")
    return ids, np.vstack(rows)
