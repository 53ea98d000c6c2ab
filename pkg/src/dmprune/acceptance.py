"""Self-contained verification of every advertised numeric guarantee.

Each check returns a CheckResult and is runnable on a fresh install with
no external data: demo bundles are synthesized in temporary directories.
`dmprune verify` prints one line per check and exits 3 on any failure;
the pytest suite wraps the same functions one test per check.
"""

from __future__ import annotations

import contextlib
import io
import math
import os
import tempfile
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import refnet as rn
from .allocator import (brute_force_allocate, dp_allocate_counts,
                        dp_allocate_flops, uniform_allocate)
from .distortion import (DistortionCurve, delta_curve_direct,
                         delta_curve_incremental)
from .hessian import auto_kappa, empirical_fisher, quad_form
from .model_ir import (BundleError, GradientBundle, ModelBundle, flops_of,
                       load_bundle, write_csv)
from .pipeline import PruneConfig, compute_curves, run_prune
from .scoring import count_grid, mask_at_count, prune_order, taylor_scores

ARTIFACTS_ENV = "DMPRUNE_ARTIFACTS_DIR"

# wall-clock ceilings (seconds) that are part of the guarantee
TIME_LIMITS = {
    "dp-optimality": 10.0,
    "incremental-equivalence": 30.0,
    "gradcheck": 60.0,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    wall_s: float


def format_result(res: CheckResult) -> str:
    word = "PASS" if res.passed else "FAIL"
    return f"{word}: {res.name} ({res.detail}) [{res.wall_s:.2f}s]"


def _finish(name: str, t0: float, ok: bool, detail: str) -> CheckResult:
    wall = time.perf_counter() - t0
    limit = TIME_LIMITS.get(name)
    if limit is not None:
        if wall >= limit:
            ok = False
        detail += f", wall {wall:.2f}s < {limit:.0f}s"
    return CheckResult(name=name, passed=ok, detail=detail, wall_s=wall)


def _artifacts_dir(path: str | None) -> str:
    out = path or os.environ.get(ARTIFACTS_ENV) \
        or os.path.join(os.getcwd(), "artifacts")
    os.makedirs(out, exist_ok=True)
    return out


def _random_curve(rng, dim: int, layer_id: int) -> DistortionCurve:
    n_extra = int(rng.integers(1, 8))
    counts = np.unique(np.concatenate(
        [[0], rng.integers(1, dim + 1, size=n_extra)]))
    delta = np.concatenate([[0.0], rng.uniform(0.0, 5.0, counts.size - 1)])
    return DistortionCurve(layer_id=layer_id, counts=counts,
                           alphas=counts / dim, q=np.zeros(counts.size),
                           delta=delta, method="direct")


def check_dp_optimality(seed: int = 42) -> CheckResult:
    """DP returns the exhaustive-search optimum on random small instances."""
    name = "dp-optimality"
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 101)
    n_count = n_flops = trial = 0
    while n_count + n_flops < 200:
        trial += 1
        if trial > 1000:
            return _finish(name, t0, False, "too many infeasible draws")
        n_layers = int(rng.integers(1, 5))
        sizes = [int(rng.integers(4, 25)) for _ in range(n_layers)]
        curves = [_random_curve(rng, d, i) for i, d in enumerate(sizes)]
        costs = [float(rng.uniform(0.5, 8.0)) for _ in range(n_layers)]
        if trial % 2 == 0:
            picks = [int(cv.counts[rng.integers(0, cv.counts.size)])
                     for cv in curves]
            T = sum(picks)
            dp = dp_allocate_counts(curves, T, sizes=sizes, costs=costs)
            bf = brute_force_allocate(curves, total_prune=T, sizes=sizes,
                                      costs=costs)
            n_count += 1
        else:
            R = float(rng.uniform(0.2, 1.0))
            try:
                dp = dp_allocate_flops(curves, costs, sizes, R)
            except BundleError:
                try:
                    brute_force_allocate(curves, flops_ratio=R, sizes=sizes,
                                         costs=costs)
                except BundleError:
                    continue
                return _finish(name, t0, False,
                               f"trial {trial}: dp infeasible, brute not")
            bf = brute_force_allocate(curves, flops_ratio=R, sizes=sizes,
                                      costs=costs)
            n_flops += 1
        if dp.total_delta != bf.total_delta:
            return _finish(
                name, t0, False,
                f"trial {trial}: dp {dp.total_delta!r} != "
                f"brute {bf.total_delta!r}")
        if dp.counts() != bf.counts():
            return _finish(name, t0, False,
                           f"trial {trial}: tie-break mismatch "
                           f"{dp.counts()} vs {bf.counts()}")
    return _finish(name, t0, True,
                   f"200 instances exact ({n_count} count, {n_flops} flops)")


def check_incremental_equivalence(seed: int = 42) -> CheckResult:
    """Carried q matches from-scratch q to 1e-9 relative on random layers."""
    name = "incremental-equivalence"
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 202)
    worst = 0.0
    for trial in range(20):
        d = int(rng.integers(16, 513))
        n = int(rng.integers(2, 33))
        w = rng.standard_normal(d)
        g_rows = rng.standard_normal((n, d))
        avg = g_rows.mean(axis=0)
        order = prune_order(taylor_scores(w, avg))
        counts = count_grid(d, 16)
        mode = "factor" if trial % 2 == 0 else "dense"
        fisher = empirical_fisher(g_rows, auto_kappa(g_rows), mode=mode)
        direct = delta_curve_direct(w, avg, fisher, order, counts)
        incr = delta_curve_incremental(w, avg, fisher, order, counts)
        scale = float(np.max(np.abs(direct.q)))
        denom = np.maximum(np.abs(direct.q[1:]), 1e-15 * max(scale, 1e-300))
        rel = float(np.max(np.abs(incr.q[1:] - direct.q[1:]) / denom))
        worst = max(worst, rel)
    ok = worst <= 1e-9
    return _finish(name, t0, ok, f"20 layers, max rel dev {worst:.2e} <= 1e-9")


def check_fisher_oracle(seed: int = 42) -> CheckResult:
    """Dense Fisher equals the outer-product average; factor mode agrees."""
    name = "fisher-oracle"
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 303)
    d, n = 64, 16
    g_rows = rng.standard_normal((n, d))
    kappa = auto_kappa(g_rows)
    dense = empirical_fisher(g_rows, kappa, mode="dense")
    loop = np.zeros((d, d))
    for i in range(n):
        loop += np.outer(g_rows[i], g_rows[i])
    loop /= n
    loop[np.diag_indices(d)] += kappa
    elem = float(np.max(np.abs(dense.dense - loop)))
    if elem > 1e-12:
        return _finish(name, t0, False, f"dense vs loop {elem:.2e} > 1e-12")
    factor = empirical_fisher(g_rows, kappa, mode="factor")
    worst = 0.0
    for _ in range(1000):
        s = int(rng.integers(1, 17))
        idx = np.sort(rng.choice(d, size=s, replace=False))
        val = rng.standard_normal(s)
        qd = quad_form(dense, idx, val)
        qf = quad_form(factor, idx, val)
        worst = max(worst, abs(qd - qf) / max(abs(qd), 1e-30))
    ok = worst <= 1e-10
    return _finish(name, t0, ok,
                   f"dense vs loop {elem:.1e} <= 1e-12, factor/dense "
                   f"{worst:.1e} <= 1e-10 on 1000 sparse vectors")


def check_gradcheck(seed: int = 42) -> CheckResult:
    """Analytic layer gradients vs central differences, step 1e-5."""
    name = "gradcheck"
    t0 = time.perf_counter()
    spec = rn.default_spec()
    eps = 1e-5
    lam = (0.7, 1.3)
    worst = 0.0
    for sd in (seed, seed + 1, seed + 2):
        params = rn.init_params(spec, sd)
        x = rn.draw_safe_input(spec, params, sd + 100)
        analytic = rn.backward_scalarized(spec, params, x, lam)
        for lname in spec.layer_names():
            w = params[lname]
            fd = np.zeros(w.size)
            flat = w.reshape(-1)
            for j in range(w.size):
                keep = flat[j]
                flat[j] = keep + eps
                up = rn.scalarize(*rn.forward(spec, params, x), lam)
                flat[j] = keep - eps
                um = rn.scalarize(*rn.forward(spec, params, x), lam)
                flat[j] = keep
                fd[j] = (up - um) / (2.0 * eps)
            an = analytic[lname].reshape(-1)
            rel = float(np.max(np.abs(an - fd))
                        / max(float(np.max(np.abs(fd))), 1e-12))
            worst = max(worst, rel)
            if rel > 1e-6:
                return _finish(name, t0, False,
                               f"seed {sd} layer {lname}: rel {rel:.2e}")
    return _finish(name, t0, True,
                   f"3 seeds, all layers, max rel {worst:.1e} <= 1e-6")


def check_fidelity(seed: int = 42,
                   artifacts_dir: str | None = None) -> CheckResult:
    """Predicted delta ranks measured distortion (Spearman >= 0.8)."""
    name = "approximation-fidelity"
    t0 = time.perf_counter()
    spec = rn.default_spec()
    params = rn.init_params(spec, seed)
    calib = rn.synth_calibration(spec, 16, seed + 1)
    lam = (1.0, 1.0)
    grads = rn.build_gradient_bundle(spec, params, calib, lam)
    names = spec.layer_names()
    rows = []
    predicted = []
    measured = []
    for lid, lname in enumerate(names):
        w = params[lname]
        lg = grads.grads[lid]
        order = prune_order(taylor_scores(w, lg.avg_grad))
        counts = count_grid(w.size, 20)
        fisher = empirical_fisher(lg.per_sample, auto_kappa(lg.per_sample))
        curve = delta_curve_incremental(w.reshape(-1), lg.avg_grad, fisher,
                                        order, counts, layer_id=lid)
        for i in range(1, counts.size):
            alpha = float(curve.alphas[i])
            if alpha > 0.5:
                break
            k = int(counts[i])
            mask = mask_at_count(order, k, w.shape, layer_id=lid)
            pruned = {n2: p.copy() for n2, p in params.items()}
            pruned[lname] = pruned[lname] * mask.bits
            td = rn.true_distortion(spec, params, pruned, calib, lam)
            predicted.append(float(curve.delta[i]))
            measured.append(td)
            rows.append((lid, lname, k, alpha, float(curve.delta[i]), td))
    rho = float(stats.spearmanr(predicted, measured).statistic)
    table = os.path.join(_artifacts_dir(artifacts_dir), "fidelity_table.csv")
    write_csv(table, ["layer_id", "name", "k", "alpha", "predicted_delta",
                      "true_distortion"], rows)
    ok = rho >= 0.8
    return _finish(name, t0, ok,
                   f"spearman {rho:.3f} >= 0.8 over {len(rows)} points, "
                   f"table at {table}")


def _demo_instance(seed: int):
    spec = rn.default_spec()
    params = rn.init_params(spec, seed)
    calib = rn.synth_calibration(spec, 16, seed + 1)
    model = rn.to_model_bundle(spec, params, seed=seed)
    grads = rn.build_gradient_bundle(spec, params, calib)
    return spec, params, calib, model, grads


def check_dominance(seed: int = 42, threads: int | None = None) -> CheckResult:
    """Optimal allocation beats grid-uniform pruning on most budgets."""
    name = "end-to-end-dominance"
    t0 = time.perf_counter()
    spec, params, calib, model, grads = _demo_instance(seed)
    recs = model.prunable_layers()
    sizes = [rec.dim for rec in recs]
    costs = [rec.flops_per_weight for rec in recs]
    lnames = [rec.name for rec in recs]
    dense_flops = flops_of(model)
    wins = 0
    parts = []
    with tempfile.TemporaryDirectory() as cache:
        for r in (0.7, 0.5, 0.3):
            cfg = PruneConfig(flops_ratio=r, threads=threads, seed=seed,
                              cache_dir=cache)
            out = run_prune(model, grads, cfg, calib=calib)
            alloc = out.allocation
            slack = alloc.quantum * len(recs) / dense_flops
            if alloc.achieved_flops_ratio > r + slack:
                return _finish(
                    name, t0, False,
                    f"R={r}: achieved {alloc.achieved_flops_ratio:.5f} > "
                    f"{r} + slack {slack:.2e}")
            _, pruned_params = rn.from_model_bundle(out.pruned)
            td = rn.true_distortion(spec, params, pruned_params, calib)
            uni = uniform_allocate(out.curves, costs, sizes, r, names=lnames)
            uni_counts = {e.layer_id: e.count for e in uni.entries}
            uni_params = {n2: p.copy() for n2, p in params.items()}
            for rec in recs:
                mask = mask_at_count(out.orders[rec.layer_id],
                                     uni_counts[rec.layer_id],
                                     rec.weight.shape, layer_id=rec.layer_id)
                uni_params[rec.name] = uni_params[rec.name] * mask.bits
            td_u = rn.true_distortion(spec, params, uni_params, calib)
            win = td <= td_u
            wins += int(win)
            parts.append(f"R={r}: {td:.4f} vs uniform {td_u:.4f} "
                         f"{'<=' if win else '>'}")
    ok = wins >= 2
    return _finish(name, t0, ok, f"{wins}/3 budgets won; " + "; ".join(parts))


def check_finetune_recovery(seed: int = 42,
                            threads: int | None = None) -> CheckResult:
    """Self-distillation halves true distortion at the 50% FLOPs budget."""
    name = "finetune-recovery"
    t0 = time.perf_counter()
    spec, params, calib, model, grads = _demo_instance(seed)
    with tempfile.TemporaryDirectory() as cache:
        base_cfg = PruneConfig(flops_ratio=0.5, threads=threads, seed=seed,
                               cache_dir=cache)
        raw = run_prune(model, grads, base_cfg)
        ft_cfg = PruneConfig(flops_ratio=0.5, threads=threads, seed=seed,
                             cache_dir=cache, finetune_epochs=50,
                             finetune_lr=0.1)
        tuned = run_prune(model, grads, ft_cfg, calib=calib)
    _, raw_params = rn.from_model_bundle(raw.pruned)
    _, tuned_params = rn.from_model_bundle(tuned.pruned)
    td_raw = rn.true_distortion(spec, params, raw_params, calib)
    td_tuned = rn.true_distortion(spec, params, tuned_params, calib)
    ratio = td_tuned / td_raw if td_raw > 0 else 0.0
    ok = ratio <= 0.5
    return _finish(name, t0, ok,
                   f"true_distortion {td_raw:.4f} -> {td_tuned:.4f}, "
                   f"ratio {ratio:.3f} <= 0.5 after 50 epochs")


def _min_time(fn, reps: int = 3) -> float:
    best = math.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def check_complexity(seed: int = 42) -> CheckResult:
    """Incremental curve cost scales subcubically; DP cost scales linearly."""
    name = "complexity-scaling"
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 404)
    dims = (64, 128, 256, 512)
    times = []
    for d in dims:
        w = rng.standard_normal(d)
        g_rows = rng.standard_normal((16, d))
        avg = g_rows.mean(axis=0)
        order = prune_order(taylor_scores(w, avg))
        counts = count_grid(d, 16)
        fisher = empirical_fisher(g_rows, auto_kappa(g_rows), mode="dense")
        times.append(_min_time(lambda: delta_curve_incremental(
            w, avg, fisher, order, counts), reps=5))
    slope = float(np.polyfit(np.log(np.asarray(dims, dtype=float)),
                             np.log(np.asarray(times)), 1)[0])
    if slope > 2.3:
        return _finish(name, t0, False,
                       f"incremental exponent {slope:.2f} > 2.3")

    n_layers, dim = 8, 1000
    curves = []
    for i in range(n_layers):
        counts = np.arange(dim + 1, dtype=np.int64)
        delta = np.concatenate([[0.0],
                                np.cumsum(rng.uniform(0.0, 1.0, dim))])
        curves.append(DistortionCurve(layer_id=i, counts=counts,
                                      alphas=counts / dim,
                                      q=np.zeros(dim + 1), delta=delta,
                                      method="direct"))
    ladder = np.arange(1000, 8001, 1000)
    dp_times = [_min_time(lambda: dp_allocate_counts(curves, int(T)))
                for T in ladder]
    coef = np.polyfit(ladder.astype(float), np.asarray(dp_times), 1)
    fit = np.polyval(coef, ladder.astype(float))
    ss_res = float(np.sum((np.asarray(dp_times) - fit) ** 2))
    ss_tot = float(np.sum((np.asarray(dp_times) - np.mean(dp_times)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    ok = r2 >= 0.95
    return _finish(name, t0, ok,
                   f"incremental exponent {slope:.2f} <= 2.3, "
                   f"dp linear fit R^2 {r2:.3f} >= 0.95")


def check_reproducibility(seed: int = 42) -> CheckResult:
    """The CLI chain writes byte-identical files on consecutive runs."""
    name = "reproducibility"
    t0 = time.perf_counter()
    from . import cli

    compare = ["model.dmb", "calib.dmb", "grads.dmb", "curves.csv",
               "allocation.json", os.path.join("pruned", "pruned.dmb"),
               os.path.join("pruned", "report.json")]

    def chain(root: str) -> None:
        cache = os.path.join(root, "cache")
        model = os.path.join(root, "model.dmb")
        calib = os.path.join(root, "calib.dmb")
        grads = os.path.join(root, "grads.dmb")
        steps = [
            ["demo-export", "--seed", str(seed), "--out", root],
            ["grad", "--model", model, "--calib", calib, "--out", grads],
            ["curves", "--model", model, "--grads", grads,
             "--out", os.path.join(root, "curves.csv"),
             "--cache-dir", cache],
            ["allocate", "--model", model, "--grads", grads,
             "--flops-ratio", "0.5",
             "--out", os.path.join(root, "allocation.json"),
             "--cache-dir", cache],
            ["prune", "--model", model, "--grads", grads,
             "--flops-ratio", "0.5", "--calib", calib,
             "--out-dir", os.path.join(root, "pruned"),
             "--no-timestamps", "--cache-dir", cache],
        ]
        for argv in steps:
            with contextlib.redirect_stdout(io.StringIO()):
                code = cli.main(argv)
            if code != 0:
                raise BundleError(f"chain step {argv[0]} exited {code}")

    with tempfile.TemporaryDirectory() as tmp:
        run_a = os.path.join(tmp, "a")
        run_b = os.path.join(tmp, "b")
        os.makedirs(run_a)
        os.makedirs(run_b)
        chain(run_a)
        chain(run_b)
        for rel in compare:
            with open(os.path.join(run_a, rel), "rb") as f:
                blob_a = f.read()
            with open(os.path.join(run_b, rel), "rb") as f:
                blob_b = f.read()
            if blob_a != blob_b:
                return _finish(name, t0, False, f"{rel} differs across runs")
    return _finish(name, t0, True,
                   f"{len(compare)} files byte-identical across two runs")


def run_all(seed: int = 42, threads: int | None = None,
            artifacts_dir: str | None = None) -> list[CheckResult]:
    return [
        check_dp_optimality(seed),
        check_incremental_equivalence(seed),
        check_fisher_oracle(seed),
        check_gradcheck(seed),
        check_fidelity(seed, artifacts_dir),
        check_dominance(seed, threads),
        check_finetune_recovery(seed, threads),
        check_complexity(seed),
        check_reproducibility(seed),
    ]


def verify_files(model_path: str, grads_path: str) -> list[CheckResult]:
    """Validation suite for an externally produced bundle pair."""
    results = []

    def timed(name: str, fn) -> bool:
        t0 = time.perf_counter()
        try:
            detail = fn()
            results.append(CheckResult(name, True, detail,
                                       time.perf_counter() - t0))
            return True
        except (BundleError, OSError) as e:
            results.append(CheckResult(name, False, str(e),
                                       time.perf_counter() - t0))
            return False

    state: dict = {}

    def load() -> str:
        for path, what, klass in ((model_path, "model bundle", ModelBundle),
                                  (grads_path, "gradient bundle",
                                   GradientBundle)):
            if not os.path.exists(path):
                raise BundleError(f"missing {what}: {path}")
            b = load_bundle(path)
            if not isinstance(b, klass):
                raise BundleError(f"not a {what}: {path}")
            state[what] = b
        n_layers = len(state["model bundle"].layers)
        return f"{n_layers} layers, {state['gradient bundle'].n_samples} samples"

    if not timed("bundle-load", load):
        return results
    model: ModelBundle = state["model bundle"]
    grads: GradientBundle = state["gradient bundle"]

    def coverage() -> str:
        recs = model.prunable_layers()
        for rec in recs:
            lg = grads.grads.get(rec.layer_id)
            if lg is None:
                raise BundleError(
                    f"gradient bundle missing layer {rec.layer_id}")
            if lg.avg_grad.shape != rec.weight.shape:
                raise BundleError(
                    f"avg_grad shape mismatch for layer {rec.layer_id}")
            if lg.per_sample is None:
                raise BundleError(
                    f"per-sample gradients missing for layer {rec.layer_id}")
        return f"{len(recs)} prunable layers covered"

    timed("gradient-coverage", coverage)

    def row_mean() -> str:
        worst = 0.0
        for lid, lg in grads.grads.items():
            if lg.per_sample is None:
                continue
            avg = lg.avg_grad.reshape(-1)
            gap = float(np.max(np.abs(lg.per_sample.mean(axis=0) - avg)))
            tol = 1e-10 * (1.0 + float(np.max(np.abs(avg))))
            if gap > tol:
                raise BundleError(
                    f"per-sample mean deviates from avg_grad on layer {lid}: "
                    f"{gap:.2e} > {tol:.2e}")
            worst = max(worst, gap)
        return f"max deviation {worst:.1e} within 1e-10 scaled"

    timed("row-mean-consistency", row_mean)

    def flops() -> str:
        dense = flops_of(model)
        if not dense > 0:
            raise BundleError("dense FLOPs not positive")
        return f"dense flops {dense:g}"

    timed("flops-accounting", flops)

    def curves() -> str:
        cfg = PruneConfig(k_points=8, flops_ratio=0.9)
        cvs, _, _ = compute_curves(model, grads, cfg, use_cache=False)
        return f"{len(cvs)} curves computable"

    if timed("curve-computability", curves):
        def alloc() -> str:
            cfg = PruneConfig(k_points=8, flops_ratio=0.9)
            cvs, _, _ = compute_curves(model, grads, cfg, use_cache=False)
            recs = model.prunable_layers()
            res = dp_allocate_flops(cvs, [r.flops_per_weight for r in recs],
                                    [r.dim for r in recs], 0.9,
                                    names=[r.name for r in recs])
            return (f"R=0.9 feasible, achieved "
                    f"{res.achieved_flops_ratio:.4f}")

        timed("allocation-feasible", alloc)
    return results
