"""Artifact files: binary matrices, CSV, and JSON manifests.

Matrix file layout (all little-endian)::

    offset  size  field
    0       8     magic b"GMMATRX\\0"
    8       4     version (uint32) = 1
    12      8     rows t (uint64)
    20      8     cols n (uint64)
    28      8*t*n float64 values, row-major
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "write_matrix",
    "read_matrix",
    "write_matrix_csv",
    "read_matrix_csv",
    "config_hash",
    "file_digest",
    "write_manifest",
    "read_manifest",
]

MAGIC = b"GMMATRX\0"
VERSION = 1
_HEADER = struct.Struct("<8sIQQ")


def write_matrix(path, array) -> None:
    a = np.asarray(array, dtype="<f8")
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a).tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a matrix header")
    magic, version, t, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a matrix file (bad magic)")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported matrix version {version}")
    expected = _HEADER.size + 8 * t * n
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, "<f8", t * n, _HEADER.size).reshape(t, n).astype(float)


def write_matrix_csv(path, array) -> None:
    np.savetxt(path, np.atleast_2d(np.asarray(array, dtype=float)), delimiter=",", fmt="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=float))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: dict) -> str:
    """Short stable hash of a JSON-serializable config."""
    return hashlib.sha256(_canonical(config).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, kind: str, config: dict, files, extra: dict | None = None) -> dict:
    """Write ``manifest.json`` describing the artifacts in ``directory``."""
    directory = Path(directory)
    manifest = {
        "kind": kind,
        "format_version": VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config.get("seed"),
        "files": {name: file_digest(directory / name) for name in sorted(files)},
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    return json.loads(path.read_text())
