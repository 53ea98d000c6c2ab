"""End-to-end pruning pipeline: scores -> curves -> allocation -> masks.

run_prune wires the stages over a model bundle plus its gradient bundle:
per-layer saliency orders, per-layer distortion curves on a count grid
(incremental second-order evaluation, Fisher built once per layer), a
global budget allocation, and mask application. Curves are cached on disk
keyed by a content hash of the exact inputs, so repeated runs and sweep
points reuse them; saliency orders are cheap and always recomputed.

The report is plain JSON-ready data: config echo, stage timings, the
allocation, independently recomputed FLOPs, and diagnostics (cross-layer
correlation check, optional finetune summary).
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import refnet as rn
from .allocator import AllocationResult, dp_allocate_counts, dp_allocate_flops
from .distortion import (DistortionCurve, cross_term_diagnostic,
                         delta_curve_incremental)
from .hessian import auto_kappa, empirical_fisher
from .model_ir import (BundleError, GradientBundle, LayerRecord, ModelBundle,
                       PruneMask, dump_json, flops_of)
from .scoring import count_grid, mask_at_count, prune_order, taylor_scores

SWEEP_HEADER = ["R", "achieved_ratio", "total_delta", "true_distortion"]
CACHE_ENV = "DMPRUNE_CACHE_DIR"


@dataclass
class PruneConfig:
    k_points: int = 20
    flops_ratio: float | None = None
    prune_count: int | None = None
    delta_mode: str = "squared"
    kappa: float | str = "auto"
    fisher_mode: str = "factor"
    quantum: float | None = None
    threads: int | None = None
    seed: int = 42
    cross_term_trials: int = 100
    cross_term_alpha: float = 0.25
    finetune_epochs: int = 0
    finetune_lr: float = 0.1
    finetune_train_n: int = 64
    cache_dir: str | None = None
    no_timestamps: bool = False

    def budget_mode(self) -> str:
        if (self.flops_ratio is None) == (self.prune_count is None):
            raise BundleError(
                "specify exactly one of flops_ratio or prune_count")
        return "flops_ratio" if self.flops_ratio is not None else "prune_count"

    def report_config(self) -> dict:
        out = {"k_points": self.k_points}
        if self.flops_ratio is not None:
            out["flops_ratio"] = float(self.flops_ratio)
        if self.prune_count is not None:
            out["prune_count"] = int(self.prune_count)
        out.update({
            "delta_mode": self.delta_mode,
            "kappa": self.kappa if isinstance(self.kappa, str)
            else float(self.kappa),
            "fisher_mode": self.fisher_mode,
            "seed": int(self.seed),
        })
        if self.quantum is not None:
            out["quantum"] = float(self.quantum)
        if self.finetune_epochs:
            out["finetune_epochs"] = int(self.finetune_epochs)
            out["finetune_lr"] = float(self.finetune_lr)
            out["finetune_train_n"] = int(self.finetune_train_n)
        return out


@dataclass
class PruneOutcome:
    pruned: ModelBundle
    masks: dict[int, PruneMask]
    allocation: AllocationResult
    report: dict
    curves: list[DistortionCurve] = field(repr=False, default_factory=list)
    orders: dict[int, np.ndarray] = field(repr=False, default_factory=dict)


def resolve_cache_dir(config: PruneConfig) -> str:
    if config.cache_dir:
        return config.cache_dir
    env = os.environ.get(CACHE_ENV)
    if env:
        return env
    return os.path.join(os.getcwd(), ".dmprune-cache")


def _check_coverage(model: ModelBundle, grads: GradientBundle):
    for rec in model.prunable_layers():
        lg = grads.grads.get(rec.layer_id)
        if lg is None:
            raise BundleError(f"gradient bundle missing layer {rec.layer_id}")
        if lg.avg_grad.shape != rec.weight.shape:
            raise BundleError(
                f"avg_grad shape mismatch for layer {rec.layer_id}")
        if lg.per_sample is None:
            raise BundleError(
                f"per-sample gradients required for curvature "
                f"(layer {rec.layer_id})")


def content_key(model: ModelBundle, grads: GradientBundle,
                config: PruneConfig) -> str:
    h = hashlib.sha256()
    for rec in model.prunable_layers():
        h.update(rec.name.encode())
        h.update(np.ascontiguousarray(rec.weight, dtype="<f8").tobytes())
        lg = grads.grads[rec.layer_id]
        h.update(np.ascontiguousarray(lg.avg_grad, dtype="<f8").tobytes())
        if lg.per_sample is not None:
            h.update(np.ascontiguousarray(lg.per_sample, dtype="<f8").tobytes())
    h.update(f"k={config.k_points};delta={config.delta_mode};"
             f"kappa={config.kappa};fisher={config.fisher_mode};v1".encode())
    return h.hexdigest()


def compute_orders(model: ModelBundle, grads: GradientBundle,
                   threads: int | None = None) -> dict[int, np.ndarray]:
    recs = model.prunable_layers()

    def one(rec: LayerRecord):
        g = grads.grads[rec.layer_id].avg_grad
        return rec.layer_id, prune_order(taylor_scores(rec.weight, g),
                                         rec.weight)

    with ThreadPoolExecutor(max_workers=threads or os.cpu_count()) as pool:
        return dict(pool.map(one, recs))


def _curves_from_cache(path: str, expect_n: int):
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        curves = [DistortionCurve(
            layer_id=int(c["layer_id"]),
            counts=np.asarray(c["counts"], dtype=np.int64),
            alphas=np.asarray(c["alphas"], dtype=np.float64),
            q=np.asarray(c["q"], dtype=np.float64),
            delta=np.asarray(c["delta"], dtype=np.float64),
            method=str(c["method"])) for c in data["curves"]]
        if len(curves) != expect_n:
            return None
        return curves
    except (OSError, ValueError, KeyError, TypeError):
        return None


def _curves_to_cache(path: str, key: str, curves):
    payload = {"version": 1, "key": key, "curves": [
        {"layer_id": cv.layer_id, "method": cv.method,
         "counts": [int(k) for k in cv.counts],
         "alphas": [float(a) for a in cv.alphas],
         "q": [float(v) for v in cv.q],
         "delta": [float(d) for d in cv.delta]} for cv in curves]}
    os.makedirs(os.path.dirname(path), exist_ok=True)
    dump_json(payload, path)


def compute_curves(model: ModelBundle, grads: GradientBundle,
                   config: PruneConfig, orders=None, *, use_cache=True):
    """Distortion curves for every prunable layer, cache-backed."""
    _check_coverage(model, grads)
    recs = model.prunable_layers()
    key = content_key(model, grads, config)
    cache_path = os.path.join(resolve_cache_dir(config), f"curves-{key}.json")
    if use_cache:
        cached = _curves_from_cache(cache_path, len(recs))
        if cached is not None:
            return cached, key, True
    if orders is None:
        orders = compute_orders(model, grads, config.threads)

    def one(rec: LayerRecord) -> DistortionCurve:
        lg = grads.grads[rec.layer_id]
        rows = lg.per_sample
        kappa = (auto_kappa(rows) if config.kappa == "auto"
                 else float(config.kappa))
        fisher = empirical_fisher(rows, kappa, mode=config.fisher_mode,
                                  layer_id=rec.layer_id)
        counts = count_grid(rec.dim, config.k_points)
        return delta_curve_incremental(
            rec.weight, lg.avg_grad, fisher, orders[rec.layer_id], counts,
            delta_mode=config.delta_mode, layer_id=rec.layer_id)

    with ThreadPoolExecutor(max_workers=config.threads or os.cpu_count()) as pool:
        curves = list(pool.map(one, recs))
    if use_cache:
        try:
            _curves_to_cache(cache_path, key, curves)
        except OSError:
            pass
    return curves, key, False


def allocate(model: ModelBundle, curves, config: PruneConfig) -> AllocationResult:
    recs = model.prunable_layers()
    sizes = [rec.dim for rec in recs]
    costs = [rec.flops_per_weight for rec in recs]
    names = [rec.name for rec in recs]
    if config.budget_mode() == "flops_ratio":
        return dp_allocate_flops(curves, costs, sizes, config.flops_ratio,
                                 quantum=config.quantum, names=names)
    return dp_allocate_counts(curves, config.prune_count, sizes=sizes,
                              costs=costs, names=names)


def apply_allocation(model: ModelBundle, orders, allocation: AllocationResult):
    """Masks at the allocated counts and the masked copy of the bundle."""
    counts = {e.layer_id: e.count for e in allocation.entries}
    masks: dict[int, PruneMask] = {}
    layers = []
    for rec in model.layers:
        if rec.prunable and rec.layer_id in counts:
            mask = mask_at_count(orders[rec.layer_id], counts[rec.layer_id],
                                 rec.weight.shape, layer_id=rec.layer_id)
            masks[rec.layer_id] = mask
            weight = rec.weight * mask.bits
        else:
            weight = rec.weight.copy()
        layers.append(LayerRecord(layer_id=rec.layer_id, name=rec.name,
                                  kind=rec.kind, weight=weight,
                                  flops_per_weight=rec.flops_per_weight,
                                  prunable=rec.prunable))
    pruned = ModelBundle(layers=layers, meta=dict(model.meta))
    return pruned, masks


def run_prune(model: ModelBundle, grads: GradientBundle,
              config: PruneConfig, calib=None) -> PruneOutcome:
    """Full pipeline pass. Returns the pruned bundle, masks, and report.

    `calib` supplies the self-distillation inputs when finetuning is on;
    without it a fresh input set is synthesized from the run seed.
    """
    config.budget_mode()
    _check_coverage(model, grads)
    stages = []

    def stage(name):
        t0 = time.perf_counter()

        def done():
            ms = 0.0 if config.no_timestamps else (time.perf_counter() - t0) * 1e3
            stages.append({"name": name, "wall_ms": ms})
        return done

    done = stage("scores")
    orders = compute_orders(model, grads, config.threads)
    done()

    done = stage("curves")
    curves, _, _ = compute_curves(model, grads, config, orders)
    done()

    done = stage("allocate")
    allocation = allocate(model, curves, config)
    done()

    done = stage("prune")
    pruned, masks = apply_allocation(model, orders, allocation)
    done()

    diagnostics: dict = {}
    recs = model.prunable_layers()
    if config.cross_term_trials > 0 and len(recs) >= 2:
        a, b = recs[0], recs[1]
        diagnostics["cross_term"] = cross_term_diagnostic(
            a.weight, grads.grads[a.layer_id].avg_grad,
            b.weight, grads.grads[b.layer_id].avg_grad,
            alpha=config.cross_term_alpha, trials=config.cross_term_trials,
            seed=config.seed, layer_ids=(a.layer_id, b.layer_id))

    if config.finetune_epochs > 0:
        if rn.is_refnet_bundle(model):
            done = stage("finetune")
            spec, dense_params = rn.from_model_bundle(model)
            _, pruned_params = rn.from_model_bundle(pruned)
            names = spec.layer_names()
            mask_by_name = {names[lid]: m.bits for lid, m in masks.items()}
            if calib is not None:
                train_inputs = calib.inputs
            else:
                train_inputs = rn.synth_calibration(
                    spec, config.finetune_train_n, config.seed + 7777).inputs
            hist: list = []
            tuned = rn.finetune(spec, pruned_params, mask_by_name,
                                dense_params, train_inputs,
                                config.finetune_epochs, config.finetune_lr,
                                history=hist)
            for rec in pruned.layers:
                rec.weight = tuned[rec.name]
            done()
            diagnostics["finetune"] = {
                "epochs": int(config.finetune_epochs),
                "train_n": int(train_inputs.shape[0]),
                "loss_first": float(hist[0]),
                "loss_last": float(hist[-1]),
            }
        else:
            diagnostics["finetune"] = {"skipped": True,
                                       "reason": "not a refnet bundle"}

    dense_flops = flops_of(model)
    pruned_flops = flops_of(pruned, masks=list(masks.values()))
    report = {
        "config": config.report_config(),
        "stages": stages,
        "allocation": allocation.to_dict(),
        "flops": {"dense": dense_flops, "pruned": pruned_flops,
                  "ratio": pruned_flops / dense_flops},
        "diagnostics": diagnostics,
    }
    return PruneOutcome(pruned=pruned, masks=masks, allocation=allocation,
                        report=report, curves=curves, orders=orders)


def pareto_sweep(model: ModelBundle, grads: GradientBundle, ratios,
                 config: PruneConfig, calib=None) -> list[dict]:
    """Allocation quality across FLOPs budgets, reusing one curve set.

    Rows carry (R, achieved_ratio, total_delta, true_distortion); the last
    is measured only for refnet bundles (calibration defaults to the
    bundle's recorded seed + 1 when not supplied).
    """
    orders = compute_orders(model, grads, config.threads)
    curves, _, _ = compute_curves(model, grads, config, orders)
    recs = model.prunable_layers()
    sizes = [rec.dim for rec in recs]
    costs = [rec.flops_per_weight for rec in recs]
    names = [rec.name for rec in recs]
    is_ref = rn.is_refnet_bundle(model)
    spec = dense_params = None
    if is_ref:
        spec, dense_params = rn.from_model_bundle(model)
        if calib is None:
            seed = int(model.meta.get("seed", "0"))
            calib = rn.synth_calibration(spec, 16, seed + 1)
    rows = []
    for r in ratios:
        alloc = dp_allocate_flops(curves, costs, sizes, float(r),
                                  quantum=config.quantum, names=names)
        pruned, masks = apply_allocation(model, orders, alloc)
        achieved = flops_of(pruned, masks=list(masks.values())) / flops_of(model)
        td = None
        if is_ref:
            _, pruned_params = rn.from_model_bundle(pruned)
            td = rn.true_distortion(spec, dense_params, pruned_params, calib,
                                    grads.lambda_used)
        rows.append({"R": float(r), "achieved_ratio": achieved,
                     "total_delta": alloc.total_delta,
                     "true_distortion": td})
    return rows
