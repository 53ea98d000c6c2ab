"""Checkpoint-to-DMB bridge: weight extraction and calibration gradients.

The scalarized objective is u = lambda_b * sum(box) + lambda_c * sum(conf),
differentiated once per calibration sample; per-sample rows are widened to
float64 and averaged exactly, so the row-mean invariant the pruning engine
checks on load holds to machine precision. flops_per_weight follows the
1 MAC = 2 FLOPs convention, with conv costs read off one probe forward
pass (2 * H_out * W_out from the recorded output shape, 2 for dense).
"""

from __future__ import annotations

import fnmatch
import os

import numpy as np
import torch
from torch import nn

from .dmb import (ExportError, read_calibration, write_gradient_bundle,
                  write_model_bundle)

_KINDS = {nn.Conv2d: "conv2d", nn.Linear: "dense"}


def select_layers(model: nn.Module, patterns) -> list[tuple[str, nn.Module]]:
    """Weighted modules matching any glob pattern, in model order.

    Every pattern must match at least one weighted module; the union must
    be non-empty and float-typed.
    """
    weighted = [(name, mod) for name, mod in model.named_modules()
                if getattr(mod, "weight", None) is not None]
    chosen: dict[str, nn.Module] = {}
    for pat in patterns:
        hits = [(n, m) for n, m in weighted if fnmatch.fnmatch(n, pat)]
        if not hits:
            raise ExportError(f"unmatched layer pattern: {pat!r}")
        chosen.update(hits)
    selected = [(n, m) for n, m in weighted if n in chosen]
    if not selected:
        raise ExportError("no prunable layers")
    for name, mod in selected:
        if not torch.is_floating_point(mod.weight):
            raise ExportError(f"non-float weights: {name}")
        if type(mod) not in _KINDS:
            raise ExportError(f"unsupported layer type: {name} "
                              f"({type(mod).__name__})")
    return selected


def probe_flops(model: nn.Module, selected, example) -> dict[str, float]:
    """flops_per_weight per selected layer from one shape-probe forward."""
    out_shapes: dict[str, tuple] = {}
    hooks = []
    for name, mod in selected:
        def record(mod, args, out, name=name):
            out_shapes[name] = tuple(out.shape)
        hooks.append(mod.register_forward_hook(record))
    try:
        with torch.no_grad():
            model(example)
    finally:
        for h in hooks:
            h.remove()
    flops = {}
    for name, mod in selected:
        if name not in out_shapes:
            raise ExportError(
                f"layer not reached by the probe forward pass: {name}")
        shape = out_shapes[name]
        if isinstance(mod, nn.Conv2d):
            flops[name] = 2.0 * shape[-2] * shape[-1]
        else:
            flops[name] = 2.0
    return flops


def per_sample_gradients(model: nn.Module, selected, inputs, lam):
    """(avg_grad, per_sample rows) per layer of d u / d W, float64.

    inputs is an N x C x H x W array; one backward pass per sample.
    """
    lb, lc = float(lam[0]), float(lam[1])
    if lb < 0.0 or lc < 0.0:
        raise ExportError("lambda weights must be nonnegative")
    x = torch.as_tensor(np.asarray(inputs))
    if x.ndim != 4:
        raise ExportError(f"calibration inputs must be N x C x H x W, "
                          f"got shape {tuple(x.shape)}")
    x = x.to(next(model.parameters()).dtype)
    rows: dict[str, list[np.ndarray]] = {name: [] for name, _ in selected}
    model.zero_grad(set_to_none=True)
    for i in range(x.shape[0]):
        box, conf = model(x[i:i + 1])
        u = lb * box.sum() + lc * conf.sum()
        u.backward()
        for name, mod in selected:
            g = mod.weight.grad
            if g is None:
                raise ExportError(f"gradient capture failure: {name}")
            rows[name].append(g.detach().cpu().double().numpy().reshape(-1))
        model.zero_grad(set_to_none=True)
    out = {}
    for name, mod in selected:
        mat = np.stack(rows[name])
        avg = mat.mean(axis=0).reshape(tuple(mod.weight.shape))
        out[name] = (avg, mat)
    return out


def export_checkpoint(model: nn.Module, patterns, calib_inputs, lam,
                      out_dir, *, n: int | None = None,
                      meta: dict | None = None):
    """Write model.dmb and grads.dmb for the selected layers.

    calib_inputs is an in-memory N x C x H x W array; n truncates it.
    Returns (model_path, grads_path).
    """
    inputs = np.asarray(calib_inputs, dtype=np.float64)
    if inputs.ndim != 4 or inputs.shape[0] < 1:
        raise ExportError("calibration inputs must be a non-empty "
                          "N x C x H x W array")
    if n is not None:
        if not 1 <= n <= inputs.shape[0]:
            raise ExportError(f"sample count out of range: {n} "
                              f"(have {inputs.shape[0]})")
        inputs = inputs[:n]

    selected = select_layers(model, patterns)
    example = torch.as_tensor(inputs[0:1]).to(
        next(model.parameters()).dtype)
    flops = probe_flops(model, selected, example)
    grads = per_sample_gradients(model, selected, inputs, lam)

    layers = []
    grad_map = {}
    for layer_id, (name, mod) in enumerate(selected):
        layers.append({
            "name": name,
            "layer_id": layer_id,
            "kind": _KINDS[type(mod)],
            # exact widening: every float32 is representable in float64
            "weight": mod.weight.detach().cpu().double().numpy(),
            "flops_per_weight": flops[name],
        })
        grad_map[layer_id] = grads[name]

    os.makedirs(out_dir, exist_ok=True)
    model_path = os.path.join(out_dir, "model.dmb")
    grads_path = os.path.join(out_dir, "grads.dmb")
    write_model_bundle(model_path, layers, meta or {})
    write_gradient_bundle(grads_path, grad_map, lam, inputs.shape[0])
    return model_path, grads_path


def load_calibration_file(path) -> np.ndarray:
    """Calibration inputs from a DMB calibration bundle or a .npy array."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == b"DMB1":
        return read_calibration(path)
    try:
        arr = np.load(path)
    except (ValueError, OSError) as e:
        raise ExportError(f"cannot read calibration inputs: {path} "
                          f"({e})") from e
    return np.asarray(arr, dtype=np.float64)
