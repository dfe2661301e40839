"""Sample files and run manifests on disk.

Samples are raw little-endian float64 in row-major order (``<name>.bin``)
with a JSON sidecar (``<name>.json``) holding the shape and a SHA-256 of the
bytes.  Manifests are one JSON object per line in ``manifests.jsonl``.
"""

from __future__ import annotations

import hashlib
import json
import threading
from pathlib import Path

import numpy as np

__all__ = ["write_samples", "read_samples", "append_manifest", "read_manifests", "SampleFileError"]

_DTYPE = np.dtype("<f8")
_lock = threading.Lock()


class SampleFileError(IOError):
    pass


def write_samples(path, samples) -> dict:
    """Write ``samples`` to ``path`` (``.bin``) plus sidecar; returns the sidecar dict."""
    path = Path(path).with_suffix(".bin")
    arr = np.ascontiguousarray(np.asarray(samples, dtype=_DTYPE))
    data = arr.tobytes(order="C")
    meta = {"shape": list(arr.shape), "dtype": "<f8", "order": "C",
            "sha256": hashlib.sha256(data).hexdigest()}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1) + "\n")
    return meta


def read_samples(path, verify: bool = True) -> np.ndarray:
    path = Path(path).with_suffix(".bin")
    meta = json.loads(path.with_suffix(".json").read_text())
    data = path.read_bytes()
    if verify and hashlib.sha256(data).hexdigest() != meta["sha256"]:
        raise SampleFileError(f"hash mismatch for {path}")
    shape = tuple(meta["shape"])
    if len(data) != _DTYPE.itemsize * int(np.prod(shape)):
        raise SampleFileError(f"size mismatch for {path}")
    return np.frombuffer(data, dtype=_DTYPE).reshape(shape).copy()


def _default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def append_manifest(path, manifest: dict):
    """Append one manifest line; serialized across threads."""
    line = json.dumps(manifest, sort_keys=True, default=_default)
    path = Path(path)
    with _lock:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a") as fh:
            fh.write(line + "\n")


def read_manifests(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
