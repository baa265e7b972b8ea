"""Result files: CSV tables, PGM frame dumps and run manifests."""
from __future__ import annotations

import csv
import hashlib
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__, kernels


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, rows, columns=None):
    """Write dict rows; floats use ``repr`` so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def to_gray8(data):
    """Linear map from [0, grid max] to [0, 255]; the grid max becomes 255."""
    d = np.asarray(data, dtype=np.float64)
    peak = float(d.max()) if d.size else 0.0
    if not np.isfinite(peak) or peak <= 0:
        return np.zeros(d.shape, dtype=np.uint8)
    return np.clip(np.rint(np.maximum(d, 0.0) / peak * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, data):
    """Binary (P5) PGM with rows = range bins, columns = azimuth bins."""
    img = to_gray8(data)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, argv, seeds, config, inputs=None, outputs=None, extra=None):
    """Everything needed to rerun a command: argv, seeds, config and input hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "seeds": seeds,
        "config": config,
        "config_hash": config_hash(config),
        "inputs": {str(p): file_hash(p) for p in (inputs or []) if Path(p).is_file()},
        "outputs": sorted(str(o) for o in (outputs or [])),
        "versions": {"echoscape": __version__, "numpy": np.__version__,
                     "python": platform.python_version(), "kernels": kernels.BACKEND},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
