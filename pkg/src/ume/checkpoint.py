"""Checkpoint container: one JSON header line, then little-endian float32 blobs.

Header schema::

    {"format_version": 1,
     "params": [{"name": ..., "shape": [...], "offset": <bytes into blob section>}, ...],
     "meta": {...}}

Blobs follow the header line in header order. Round-trips are bit-exact for
float32 arrays. Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    """Write ``arrays`` (name -> ndarray, insertion-ordered) plus ``meta``."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = {"format_version": FORMAT_VERSION, "params": entries, "meta": meta or {}}
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(json.dumps(header).encode("utf-8"))
            f.write(b"\n")
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (name -> float32 ndarray, meta dict)."""
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: malformed header: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format_version "
                                  f"{header.get('format_version')!r}")
        blob = f.read()
    arrays = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: blob truncated for parameter {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).copy()
    return arrays, header.get("meta", {})


def load_into_model(model, path):
    """Load parameter values from ``path`` into ``model``, strictly by name.

    Missing, unexpected, or shape-mismatched parameters are all collected and
    reported in one error.
    """
    arrays, meta = load_checkpoint(path)
    params = {p.name: p for p in model.named_parameters()}
    missing = sorted(set(params) - set(arrays))
    unexpected = sorted(set(arrays) - set(params))
    mismatched = sorted(name for name in set(params) & set(arrays)
                        if params[name].data.shape != arrays[name].shape)
    if missing or unexpected or mismatched:
        parts = []
        if mismatched:
            detail = ", ".join(f"{n} (checkpoint {arrays[n].shape} vs model "
                               f"{params[n].data.shape})" for n in mismatched)
            parts.append(f"shape mismatch: {detail}")
        if missing:
            parts.append(f"missing from checkpoint: {', '.join(missing)}")
        if unexpected:
            parts.append(f"unexpected in checkpoint: {', '.join(unexpected)}")
        raise CheckpointError(f"{path}: " + "; ".join(parts))
    for name, p in params.items():
        p.data = arrays[name].astype(p.data.dtype)
    return meta


def save_optimizer_state(path, params, step_meta=None):
    arrays = {}
    for p in params:
        arrays[f"{p.name}.exp_avg"] = p.exp_avg
        arrays[f"{p.name}.exp_avg_sq"] = p.exp_avg_sq
    meta = dict(step_meta or {})
    meta["param_steps"] = {p.name: p.step for p in params}
    return save_checkpoint(path, arrays, meta)


def load_optimizer_state(path, params):
    arrays, meta = load_checkpoint(path)
    steps = meta.get("param_steps", {})
    for p in params:
        try:
            p.exp_avg = arrays[f"{p.name}.exp_avg"].astype(p.data.dtype)
            p.exp_avg_sq = arrays[f"{p.name}.exp_avg_sq"].astype(p.data.dtype)
        except KeyError as exc:
            raise CheckpointError(f"{path}: no optimizer state for {p.name!r}") from exc
        p.step = int(steps.get(p.name, 0))
    return meta
