"""File formats: CSV tables, JSON tensor dumps and run manifests.

Column meanings of every CSV written here are listed in ``docs/csv_schemas.md``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import InvalidInputError
from .imps import UniformMPS

TENSOR_FORMAT = "scarfinder-imps"
TENSOR_VERSION = 1


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else ("nan" if math.isnan(x) else str(float(x)))
    if isinstance(x, (np.integer,)):
        return int(x)
    return x


def write_csv(path, header, rows) -> Path:
    """UTF-8 CSV with a header row; floats written with full ``repr`` precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])
    return path


def read_csv(path) -> tuple:
    """Header and rows (as strings) of a CSV written by :func:`write_csv`."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def encode_array(a) -> dict:
    a = np.asarray(a)
    return {
        "shape": list(a.shape),
        "dtype": str(a.dtype),
        "real": np.real(a).ravel().tolist(),
        "imag": np.imag(a).ravel().tolist() if np.iscomplexobj(a) else None,
    }


def decode_array(d) -> np.ndarray:
    re = np.asarray(d["real"], dtype=float)
    a = re if d.get("imag") is None else re + 1j * np.asarray(d["imag"], dtype=float)
    return a.reshape(d["shape"]).astype(d["dtype"])


def dump_mps(psi: UniformMPS, path) -> Path:
    """JSON dump of a canonical iMPS with format, version, shape and dtype headers.

    Site tensors have shape ``(d, chi_left, chi_right)``; ``weights[i]`` are the
    Schmidt values on the bond left of site ``i``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": TENSOR_FORMAT,
        "version": TENSOR_VERSION,
        "unit_cell": psi.unit_cell,
        "local_dim": psi.local_dim,
        "tensors": [encode_array(t) for t in psi.tensors],
        "weights": [encode_array(w) for w in psi.weights],
    }
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def load_mps(path) -> UniformMPS:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != TENSOR_FORMAT:
        raise InvalidInputError(f"{path}: not a {TENSOR_FORMAT} file")
    if doc.get("version") != TENSOR_VERSION:
        raise InvalidInputError(f"{path}: unsupported version {doc.get('version')}")
    tensors = [decode_array(t) for t in doc["tensors"]]
    weights = [decode_array(w).real for w in doc["weights"]]
    return UniformMPS(tensors, weights)


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def versions() -> dict:
    return {
        "scarfinder": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def write_manifest(out_dir, command: str, config_text: str, seeds, wall_time: float, outputs,
                   status: str = "ok", extra: dict | None = None) -> Path:
    """``manifest.json`` with config hash, seeds, library versions and wall time."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config_sha256": config_hash(config_text),
        "seeds": seeds,
        "versions": versions(),
        "wall_time_s": wall_time,
        "status": status,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, default=json_default), encoding="utf-8")
    return path


def json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
