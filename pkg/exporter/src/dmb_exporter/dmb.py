"""Standalone writer (and calibration reader) for the DMB container.

A DMB file is: 4 magic bytes b"DMB1", a little-endian uint64 manifest
length, a UTF-8 JSON manifest, then concatenated raw little-endian float64
blobs. Floats in the manifest carry 17 significant digits so identical
inputs serialize byte-identically. This module deliberately shares no code
with the pruning engine; the file format is the only contract between the
two sides.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"DMB1"
FORMAT_VERSION = 1


class ExportError(ValueError):
    """Invalid export inputs or a malformed DMB file."""


def fmt17(x) -> str:
    return "%.17g" % float(x)


def _jsonify(obj):
    if isinstance(obj, dict):
        return "{" + ", ".join(
            json.dumps(str(k)) + ": " + _jsonify(v) for k, v in obj.items()
        ) + "}"
    if isinstance(obj, (list, tuple)) or isinstance(obj, np.ndarray):
        return "[" + ", ".join(_jsonify(v) for v in list(obj)) + "]"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt17(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def dump_json(obj) -> str:
    return _jsonify(obj) + "\n"


def _as_f64(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ExportError("non-finite tensor")
    return arr


def _entry(name, role, layer_id, arr, *, flops_per_weight=0.0, kind="opaque",
           prunable=False, offset=0):
    return {
        "name": str(name),
        "role": role,
        "layer_id": int(layer_id),
        "shape": [int(s) for s in arr.shape],
        "dtype": "f64",
        "byte_offset": int(offset),
        "byte_length": int(arr.size * 8),
        "flops_per_weight": float(flops_per_weight),
        "kind": kind,
        "prunable": bool(prunable),
    }


def _write(path, manifest: dict, blobs: list[bytes]) -> None:
    mbytes = dump_json(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for b in blobs:
            f.write(b)


def write_model_bundle(path, layers, meta: dict[str, str]) -> None:
    """layers: iterable of dicts with keys name, layer_id, kind, weight,
    flops_per_weight (weights become float64 blobs, prunable=True)."""
    entries = []
    blobs = []
    offset = 0
    for layer in layers:
        arr = _as_f64(layer["weight"])
        entries.append(_entry(layer["name"], "weight", layer["layer_id"],
                              arr, flops_per_weight=layer["flops_per_weight"],
                              kind=layer["kind"], prunable=True,
                              offset=offset))
        blobs.append(arr.astype("<f8").tobytes())
        offset += arr.size * 8
    if not entries:
        raise ExportError("no prunable layers")
    manifest = {"version": FORMAT_VERSION, "bundle": "model",
                "meta": {str(k): str(v) for k, v in meta.items()},
                "entries": entries}
    _write(path, manifest, blobs)


def write_gradient_bundle(path, grads, lam, n_samples: int) -> None:
    """grads: {layer_id: (avg_grad array, per_sample N x D array)}."""
    lb, lc = float(lam[0]), float(lam[1])
    if lb < 0.0 or lc < 0.0:
        raise ExportError("lambda weights must be nonnegative")
    entries = []
    blobs = []
    offset = 0

    def push(name, role, layer_id, arr):
        nonlocal offset
        entries.append(_entry(name, role, layer_id, arr, offset=offset))
        blobs.append(arr.astype("<f8").tobytes())
        offset += arr.size * 8

    for layer_id in sorted(grads):
        avg, rows = grads[layer_id]
        avg = _as_f64(avg)
        rows = _as_f64(rows)
        if rows.shape != (int(n_samples), avg.size):
            raise ExportError(
                f"per_sample_grads shape mismatch for layer {layer_id}")
        name = f"layer{layer_id:03d}"
        push(name, "avg_grad", layer_id, avg)
        push(name, "per_sample_grads", layer_id, rows)
    if not entries:
        raise ExportError("no gradients to write")
    manifest = {"version": FORMAT_VERSION, "bundle": "gradient",
                "lambda": [lb, lc], "n_samples": int(n_samples),
                "entries": entries}
    _write(path, manifest, blobs)


def _parse(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ExportError(f"not a DMB file: {path}")
    (mlen,) = struct.unpack("<Q", raw[4:12])
    if 12 + mlen > len(raw):
        raise ExportError("malformed manifest: truncated")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ExportError(f"malformed manifest: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise ExportError(f"version unsupported: {manifest.get('version')!r}")
    return manifest, raw[12 + mlen:]


def read_calibration(path) -> np.ndarray:
    """Stacked calibration inputs from a DMB calibration bundle."""
    manifest, blob = _parse(path)
    if manifest.get("bundle") != "calibration":
        raise ExportError(f"not a calibration bundle: {path}")
    for e in manifest.get("entries", []):
        if e.get("name") == "inputs":
            shape = tuple(int(s) for s in e["shape"])
            start = int(e["byte_offset"])
            length = int(e["byte_length"])
            if length != 8 * int(np.prod(shape)) or start + length > len(blob):
                raise ExportError("tensor byte-length mismatch: inputs")
            arr = np.frombuffer(blob[start:start + length], dtype="<f8")
            return arr.reshape(shape).astype(np.float64, copy=True)
    raise ExportError("calibration bundle has no inputs entry")
