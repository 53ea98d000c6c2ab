"""Model/gradient containers, FLOPs accounting, and the DMB on-disk format.

A DMB file is: 4 magic bytes b"DMB1", a little-endian uint64 manifest length,
a UTF-8 JSON manifest, then concatenated raw little-endian float64 blobs.
Entry byte offsets are relative to the first byte after the manifest. The
manifest lists one entry per stored tensor:

    {name, role, layer_id, shape, dtype, byte_offset, byte_length,
     flops_per_weight, kind, prunable}

with role in {weight, avg_grad, per_sample_grads, mask} and dtype always
"f64". Three bundle types share the layout: "model" (weights, optionally
mask entries), "gradient" (avg_grad + optional per_sample_grads rows, plus
top-level lambda/n_samples), and "calibration" (a single stacked input
tensor reusing role "weight" with kind "opaque"). Writing then reading a
bundle reproduces every tensor bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DMB1"
FORMAT_VERSION = 1
LAYER_KINDS = ("dense", "conv2d", "opaque")
ROLES = ("weight", "avg_grad", "per_sample_grads", "mask")


class BundleError(ValueError):
    """Invalid bundle contents or a malformed DMB file."""


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise BundleError(f"non-finite tensor: {what}")


def fmt17(x) -> str:
    """Format a float with 17 significant digits (exact double round-trip)."""
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


def dump_json(obj, path=None) -> str:
    """Serialize to JSON with floats at 17 significant digits.

    Key order follows insertion order, so repeated runs with identical
    inputs produce byte-identical files.
    """
    text = _jsonify(obj) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    return text


def write_csv(path, header: list[str], rows) -> None:
    """CSV with %.17g floats and fixed \\n line endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if v is None:
                    cells.append("")
                elif isinstance(v, (float, np.floating)):
                    cells.append(fmt17(v))
                else:
                    cells.append(str(v))
            f.write(",".join(cells) + "\n")


@dataclass
class LayerRecord:
    """One named weight tensor plus its pruning metadata.

    flops_per_weight is the per-nonzero cost at batch size 1 with the
    1 MAC = 2 FLOPs convention (dense: 2, conv2d: 2 * H_out * W_out).
    """

    layer_id: int
    name: str
    kind: str
    weight: np.ndarray
    flops_per_weight: float
    prunable: bool = True

    def __post_init__(self):
        self.weight = as_f64(self.weight)
        self.validate()

    @property
    def dim(self) -> int:
        return int(self.weight.size)

    def validate(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise BundleError(f"unknown layer kind: {self.kind!r}")
        if self.weight.size == 0:
            raise BundleError(f"empty weight tensor: {self.name}")
        check_finite(self.weight, self.name)
        if not (self.flops_per_weight >= 0.0):
            raise BundleError(f"negative flops_per_weight: {self.name}")


@dataclass
class PruneMask:
    """Binary keep-mask over one layer plus the saliency order it came from.

    bits is a bool array shaped like the weight (False = pruned). The zero
    positions are exactly the first popcount-of-zeros entries of order.
    """

    layer_id: int
    bits: np.ndarray
    order: np.ndarray

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=bool)
        self.order = np.ascontiguousarray(self.order, dtype=np.int64)
        self.validate()

    @property
    def n_pruned(self) -> int:
        return int(self.bits.size - np.count_nonzero(self.bits))

    def validate(self) -> None:
        n = self.bits.size
        if self.order.shape != (n,):
            raise BundleError("mask order length mismatch")
        if not np.array_equal(np.sort(self.order), np.arange(n)):
            raise BundleError("mask order is not a permutation")
        zeros = np.flatnonzero(~self.bits.ravel())
        if not np.array_equal(np.sort(self.order[: zeros.size]), zeros):
            raise BundleError("mask zeros do not match order prefix")


def canonical_order(bits: np.ndarray) -> np.ndarray:
    """Order with pruned indices first (ascending), kept indices after."""
    flat = np.ascontiguousarray(bits, dtype=bool).ravel()
    return np.concatenate([np.flatnonzero(~flat), np.flatnonzero(flat)]).astype(np.int64)


@dataclass
class ModelBundle:
    layers: list[LayerRecord]
    meta: dict[str, str] = field(default_factory=dict)
    masks: dict[int, PruneMask] | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not any(rec.prunable for rec in self.layers):
            raise BundleError("no prunable layers")
        names = [rec.name for rec in self.layers]
        if len(set(names)) != len(names):
            raise BundleError("duplicate layer names")
        ids = [rec.layer_id for rec in self.layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise BundleError("layer ids not strictly increasing")
        for k, v in self.meta.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise BundleError("meta must map strings to strings")

    def layer(self, layer_id: int) -> LayerRecord:
        for rec in self.layers:
            if rec.layer_id == layer_id:
                return rec
        raise BundleError(f"unknown layer id: {layer_id}")

    def prunable_layers(self) -> list[LayerRecord]:
        return [rec for rec in self.layers if rec.prunable]


@dataclass
class LayerGrads:
    avg_grad: np.ndarray
    per_sample: np.ndarray | None = None

    def __post_init__(self):
        self.avg_grad = as_f64(self.avg_grad)
        if self.per_sample is not None:
            self.per_sample = as_f64(self.per_sample)


@dataclass
class GradientBundle:
    """Scalarized-output gradients per layer, averaged over calibration.

    per_sample rows, when present, are N x D_i flattened gradients whose
    row mean must match avg_grad to 1e-10 relative to the gradient scale.
    """

    grads: dict[int, LayerGrads]
    lambda_used: tuple[float, float]
    n_samples: int

    def __post_init__(self):
        self.lambda_used = (float(self.lambda_used[0]), float(self.lambda_used[1]))
        self.validate()

    def validate(self) -> None:
        if self.n_samples < 1:
            raise BundleError("gradient bundle needs n_samples >= 1")
        if not all(l >= 0.0 for l in self.lambda_used):
            raise BundleError("lambda weights must be nonnegative")
        for layer_id, lg in self.grads.items():
            check_finite(lg.avg_grad, f"avg_grad[{layer_id}]")
            if lg.per_sample is not None:
                check_finite(lg.per_sample, f"per_sample_grads[{layer_id}]")
                if lg.per_sample.ndim != 2 or lg.per_sample.shape != (
                    self.n_samples,
                    lg.avg_grad.size,
                ):
                    raise BundleError(
                        f"per_sample_grads shape mismatch for layer {layer_id}"
                    )
                mean = lg.per_sample.mean(axis=0)
                scale = 1.0 + float(np.max(np.abs(lg.avg_grad)))
                err = float(np.max(np.abs(mean - lg.avg_grad.ravel())))
                if err > 1e-10 * scale:
                    raise BundleError(
                        f"per-sample row mean deviates from avg_grad "
                        f"(layer {layer_id}, err {err:g})"
                    )


@dataclass
class CalibrationSet:
    """Stacked calibration inputs, shape (N, *input_shape)."""

    inputs: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.inputs = as_f64(self.inputs)
        if self.inputs.ndim < 2 or self.inputs.shape[0] < 1:
            raise BundleError("calibration set needs at least one sample")
        check_finite(self.inputs, "calibration inputs")

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])


def flops_of(bundle: ModelBundle, masks: list[PruneMask] | None = None) -> float:
    """Total FLOPs = sum over prunable layers of flops_per_weight * nnz.

    nnz is the mask popcount when a mask covers the layer, else the full
    weight count. Opaque/non-prunable layers are excluded from the total.
    """
    by_id: dict[int, PruneMask] = {}
    if masks:
        for m in masks:
            by_id[m.layer_id] = m
    prunable_ids = {rec.layer_id for rec in bundle.layers if rec.prunable}
    for layer_id, m in by_id.items():
        if layer_id not in prunable_ids:
            raise BundleError(f"mask for non-prunable layer: {layer_id}")
        if m.bits.shape != bundle.layer(layer_id).weight.shape:
            raise BundleError(f"mask shape mismatch for layer {layer_id}")
    total = 0.0
    for rec in bundle.layers:
        if not rec.prunable:
            continue
        if rec.layer_id in by_id:
            nnz = int(np.count_nonzero(by_id[rec.layer_id].bits))
        else:
            nnz = rec.dim
        total += rec.flops_per_weight * nnz
    return total


# --- container writing -------------------------------------------------


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _entry(name, role, layer_id, arr, *, flops_per_weight=0.0, kind="opaque",
           prunable=False, offset=0):
    return {
        "name": name,
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


def save_bundle(bundle, path, *, masks: list[PruneMask] | None = None) -> None:
    """Write a ModelBundle, GradientBundle, or CalibrationSet as a DMB file.

    masks may accompany a ModelBundle only; they are stored as extra
    role="mask" entries (bits as 0.0/1.0 float64).
    """
    entries = []
    blobs = []
    offset = 0

    def push(name, role, layer_id, arr, **kw):
        nonlocal offset
        arr = as_f64(arr)
        entries.append(_entry(name, role, layer_id, arr, offset=offset, **kw))
        blobs.append(_blob(arr))
        offset += arr.size * 8

    if isinstance(bundle, ModelBundle):
        bundle.validate()
        manifest = {"version": FORMAT_VERSION, "bundle": "model",
                    "meta": dict(bundle.meta)}
        for rec in bundle.layers:
            push(rec.name, "weight", rec.layer_id, rec.weight,
                 flops_per_weight=rec.flops_per_weight, kind=rec.kind,
                 prunable=rec.prunable)
        for m in (masks or []):
            rec = bundle.layer(m.layer_id)
            if m.bits.shape != rec.weight.shape:
                raise BundleError(f"mask shape mismatch for layer {m.layer_id}")
            push(rec.name, "mask", m.layer_id, m.bits.astype(np.float64),
                 kind=rec.kind)
    elif isinstance(bundle, GradientBundle):
        if masks:
            raise BundleError("masks only accompany model bundles")
        bundle.validate()
        manifest = {
            "version": FORMAT_VERSION,
            "bundle": "gradient",
            "lambda": [bundle.lambda_used[0], bundle.lambda_used[1]],
            "n_samples": int(bundle.n_samples),
        }
        for layer_id in sorted(bundle.grads):
            lg = bundle.grads[layer_id]
            name = f"layer{layer_id:03d}"
            push(name, "avg_grad", layer_id, lg.avg_grad)
            if lg.per_sample is not None:
                push(name, "per_sample_grads", layer_id, lg.per_sample)
    elif isinstance(bundle, CalibrationSet):
        if masks:
            raise BundleError("masks only accompany model bundles")
        manifest = {
            "version": FORMAT_VERSION,
            "bundle": "calibration",
            "meta": {"seed": str(bundle.seed), "n": str(bundle.n)},
        }
        push("inputs", "weight", 0, bundle.inputs)
    else:
        raise BundleError(f"cannot save object of type {type(bundle)!r}")

    manifest["entries"] = entries
    mbytes = dump_json(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for b in blobs:
            f.write(b)


def _read_tensor(blob: bytes, entry: dict) -> np.ndarray:
    shape = tuple(int(s) for s in entry["shape"])
    length = int(entry["byte_length"])
    start = int(entry["byte_offset"])
    expect = 8 * int(np.prod(shape)) if shape else 8
    if length != expect or start < 0 or start + length > len(blob):
        raise BundleError(f"tensor byte-length mismatch: {entry.get('name')}")
    arr = np.frombuffer(blob[start:start + length], dtype="<f8")
    return arr.reshape(shape).astype(np.float64, copy=True)


def load_bundle(path):
    """Read a DMB file back into its bundle object.

    Returns ModelBundle (with .masks populated when mask entries are
    present), GradientBundle, or CalibrationSet. Raises BundleError on any
    structural problem.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise BundleError(f"not a DMB file: {path}")
    if len(raw) < 12:
        raise BundleError(f"not a DMB file: {path}")
    (mlen,) = struct.unpack("<Q", raw[4:12])
    if 12 + mlen > len(raw):
        raise BundleError("malformed manifest: truncated")
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BundleError(f"malformed manifest: {e}") from e
    if manifest.get("version") != FORMAT_VERSION:
        raise BundleError(f"version unsupported: {manifest.get('version')!r}")
    blob = raw[12 + mlen:]
    entries = manifest.get("entries")
    if not isinstance(entries, list):
        raise BundleError("malformed manifest: missing entries")
    for e in entries:
        if e.get("dtype") != "f64":
            raise BundleError(f"unsupported dtype: {e.get('dtype')!r}")
        if e.get("role") not in ROLES:
            raise BundleError(f"unknown entry role: {e.get('role')!r}")

    btype = manifest.get("bundle")
    if btype == "model":
        layers = []
        masks: dict[int, PruneMask] = {}
        for e in entries:
            arr = _read_tensor(blob, e)
            if e["role"] == "weight":
                layers.append(LayerRecord(
                    layer_id=int(e["layer_id"]), name=str(e["name"]),
                    kind=str(e["kind"]), weight=arr,
                    flops_per_weight=float(e["flops_per_weight"]),
                    prunable=bool(e["prunable"]),
                ))
            elif e["role"] == "mask":
                bits = arr != 0.0
                masks[int(e["layer_id"])] = PruneMask(
                    layer_id=int(e["layer_id"]), bits=bits,
                    order=canonical_order(bits),
                )
            else:
                raise BundleError(f"role {e['role']!r} not valid in a model bundle")
        meta = manifest.get("meta", {})
        return ModelBundle(layers=layers, meta=dict(meta),
                           masks=masks or None)
    if btype == "gradient":
        grads: dict[int, LayerGrads] = {}
        per_sample: dict[int, np.ndarray] = {}
        for e in entries:
            arr = _read_tensor(blob, e)
            lid = int(e["layer_id"])
            if e["role"] == "avg_grad":
                grads[lid] = LayerGrads(avg_grad=arr)
            elif e["role"] == "per_sample_grads":
                per_sample[lid] = arr
            else:
                raise BundleError(f"role {e['role']!r} not valid in a gradient bundle")
        for lid, rows in per_sample.items():
            if lid not in grads:
                raise BundleError(f"per_sample_grads without avg_grad: layer {lid}")
            grads[lid].per_sample = rows
        lam = manifest.get("lambda", [1.0, 1.0])
        return GradientBundle(grads=grads,
                              lambda_used=(float(lam[0]), float(lam[1])),
                              n_samples=int(manifest.get("n_samples", 0)))
    if btype == "calibration":
        if len(entries) != 1:
            raise BundleError("calibration bundle must hold one inputs tensor")
        arr = _read_tensor(blob, entries[0])
        meta = manifest.get("meta", {})
        return CalibrationSet(inputs=arr, seed=int(meta.get("seed", "0")))
    raise BundleError(f"unknown bundle type: {btype!r}")
