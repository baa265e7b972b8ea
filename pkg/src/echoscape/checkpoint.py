"""Parameter checkpoints: a JSON manifest beside a flat little-endian float32 blob."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_F32 = np.dtype("<f4")


def save_arrays(path, arrays: dict, meta: dict | None = None):
    """Write ``<path>.json`` (name, shape, offset per tensor) and ``<path>.bin``.

    Offsets count float32 elements from the start of the blob.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_F32)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.reshape(-1).tobytes())
    manifest = {"dtype": "float32-le", "count": offset, "tensors": entries, "meta": meta or {}}
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path.with_suffix(".json")


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns ``(arrays, meta)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=_F32)
    if blob.size != manifest["count"]:
        raise ValueError(f"{path}: blob holds {blob.size} floats, manifest says {manifest['count']}")
    arrays = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return arrays, manifest.get("meta", {})
