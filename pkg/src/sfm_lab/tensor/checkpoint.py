"""Checkpoint file format.

Layout: 4-byte magic ``SFMC``, uint32 little-endian header length, a UTF-8
JSON header, then one raw little-endian float32 blob.  The header records
the network spec, parameter names/shapes (in blob order), the optimizer step
counter and the RNG address (run seed + next step), so a run can be
replayed.  Live weights are stored first, EMA weights second.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import IoError
from .optim import ParamStore

__all__ = ["load_checkpoint", "save_checkpoint"]

_MAGIC = b"SFMC"


def save_checkpoint(
    path: str | Path,
    spec_payload: dict[str, Any],
    live: ParamStore,
    ema: ParamStore,
    rng_state: dict[str, Any],
) -> None:
    if live.names() != ema.names():
        raise IoError("live and EMA stores must hold the same parameters")
    names = live.names()
    header = {
        "format": "sfm-lab-checkpoint",
        "version": 1,
        "spec": spec_payload,
        "names": names,
        "shapes": {n: list(live[n].values.shape) for n in names},
        "step_count": live.step_count,
        "rng_state": rng_state,
        "blobs": ["live", "ema"],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for store in (live, ema):
            for name in names:
                fh.write(np.ascontiguousarray(store[name].values, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Returns (header, live values, ema values)."""
    path = Path(path)
    if not path.is_file():
        raise IoError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise IoError(f"{path} is not a checkpoint file")
    (header_len,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IoError(f"corrupt checkpoint header in {path}: {exc}") from exc

    offset = 8 + header_len
    blob = raw[offset:]
    names = header["names"]
    sizes = {n: int(np.prod(header["shapes"][n])) for n in names}
    total = sum(sizes.values())
    if len(blob) != 2 * total * 4:
        raise IoError(f"checkpoint blob size mismatch in {path}")

    def read_store(start: int) -> dict[str, np.ndarray]:
        out = {}
        pos = start
        for name in names:
            count = sizes[name]
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos * 4)
            out[name] = arr.reshape(header["shapes"][name]).copy()
            pos += count
        return out

    return header, read_store(0), read_store(total)
