"""Array and manifest file I/O.

Field data travels as NPY files (format version 1.0, little-endian float32,
C order) next to JSON manifests.  Manifests record per-file SHA-256 hashes so
downstream stages can refuse corrupted inputs.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

FORMAT_VERSION = 1

__all__ = [
    "FORMAT_VERSION",
    "IoError",
    "file_sha256",
    "read_field_array",
    "read_manifest",
    "write_field_array",
    "write_manifest",
]


class IoError(RuntimeError):
    """Raised when an artifact file is missing, malformed or corrupted."""


def write_field_array(path: str | Path, values: np.ndarray) -> str:
    """Write ``values`` as float32 C-order NPY (version 1.0); returns sha256."""
    path = Path(path)
    out = np.ascontiguousarray(values, dtype=np.float32)
    with open(path, "wb") as fh:
        np.lib.format.write_array(fh, out, version=(1, 0))
    return file_sha256(path)


def read_field_array(path: str | Path, expected_sha256: str | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise IoError(f"missing array file: {path}")
    if expected_sha256 is not None:
        actual = file_sha256(path)
        if actual != expected_sha256:
            raise IoError(f"checksum mismatch for {path}: {actual} != {expected_sha256}")
    values = np.load(path, allow_pickle=False)
    if values.dtype != np.float32:
        raise IoError(f"{path}: expected float32 payload, got {values.dtype}")
    return values


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path: str | Path, payload: dict[str, Any]) -> None:
    """Write a manifest JSON with stable key ordering (byte-reproducible)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise IoError(f"missing manifest: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IoError(f"unreadable manifest {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise IoError(f"manifest {path} must hold a JSON object")
    return payload
