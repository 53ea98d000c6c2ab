"""Command-line surface for the pruning engine.

Subcommands chain into the full flow (demo-export -> grad -> curves ->
allocate -> prune, plus eval/sweep for measurement and verify for the
oracle suite). Every numeric output is printed with 17 significant
digits, so reruns with the same flags and seeds are byte-identical.

Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import refnet as rn
from .model_ir import (BundleError, CalibrationSet, GradientBundle,
                       ModelBundle, dump_json, load_bundle, save_bundle,
                       write_csv)
from .pipeline import (SWEEP_HEADER, PruneConfig, compute_curves, allocate,
                       pareto_sweep, run_prune)

USAGE_EXIT = 1
DATA_EXIT = 2
VERIFY_EXIT = 3


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT) from None


def _need(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise BundleError(f"missing {what}: {path}")
    return path


def _load_model(path: str) -> ModelBundle:
    b = load_bundle(_need(path, "model bundle"))
    if not isinstance(b, ModelBundle):
        raise BundleError(f"not a model bundle: {path}")
    return b


def _load_grads(path: str) -> GradientBundle:
    b = load_bundle(_need(path, "gradient bundle"))
    if not isinstance(b, GradientBundle):
        raise BundleError(f"not a gradient bundle: {path}")
    return b


def _load_calib(path: str) -> CalibrationSet:
    b = load_bundle(_need(path, "calibration bundle"))
    if not isinstance(b, CalibrationSet):
        raise BundleError(f"not a calibration bundle: {path}")
    return b


def _refnet_pair(bundle: ModelBundle, path: str):
    if not rn.is_refnet_bundle(bundle):
        raise BundleError(f"bundle is not a refnet: {path}")
    return rn.from_model_bundle(bundle)


def _config_from(args) -> PruneConfig:
    kappa = args.kappa
    if kappa != "auto":
        try:
            kappa = float(kappa)
        except ValueError:
            raise BundleError(f"kappa must be 'auto' or a float, "
                              f"got {kappa!r}") from None
    return PruneConfig(
        k_points=args.k,
        flops_ratio=getattr(args, "flops_ratio", None),
        prune_count=getattr(args, "prune_count", None),
        delta_mode=args.delta_mode,
        kappa=kappa,
        fisher_mode=args.fisher,
        quantum=getattr(args, "quantum", None),
        threads=args.threads,
        seed=args.seed,
        finetune_epochs=getattr(args, "finetune_epochs", 0),
        finetune_lr=getattr(args, "finetune_lr", 0.1),
        cache_dir=args.cache_dir,
        no_timestamps=getattr(args, "no_timestamps", False),
    )


def cmd_demo_export(args) -> int:
    spec = rn.default_spec()
    params = rn.init_params(spec, args.seed)
    calib = rn.synth_calibration(spec, args.n_calib, args.seed + 1)
    os.makedirs(args.out, exist_ok=True)
    model_path = os.path.join(args.out, "model.dmb")
    calib_path = os.path.join(args.out, "calib.dmb")
    save_bundle(rn.to_model_bundle(spec, params, seed=args.seed), model_path)
    save_bundle(calib, calib_path)
    print(f"wrote {model_path}")
    print(f"wrote {calib_path}")
    return 0


def cmd_grad(args) -> int:
    model = _load_model(args.model)
    spec, params = _refnet_pair(model, args.model)
    calib = _load_calib(args.calib)
    probe = None
    if args.probe_seed is not None:
        probe = rn.probe_vector(spec, args.probe_seed)
    grads = rn.build_gradient_bundle(spec, params, calib,
                                     lam=(args.lambda_b, args.lambda_c),
                                     probe=probe)
    save_bundle(grads, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_curves(args) -> int:
    model = _load_model(args.model)
    grads = _load_grads(args.grads)
    config = _config_from(args)
    curves, _, hit = compute_curves(model, grads, config,
                                    use_cache=not args.no_cache)
    names = {rec.layer_id: rec.name for rec in model.layers}
    rows = []
    for cv in curves:
        for i in range(cv.counts.size):
            rows.append((cv.layer_id, names[cv.layer_id], int(cv.counts[i]),
                         float(cv.alphas[i]), float(cv.q[i]),
                         float(cv.delta[i])))
    write_csv(args.out, ["layer_id", "name", "k", "alpha", "q", "delta"],
              rows)
    print(f"wrote {args.out} (cache {'hit' if hit else 'miss'})")
    return 0


def cmd_allocate(args) -> int:
    model = _load_model(args.model)
    grads = _load_grads(args.grads)
    config = _config_from(args)
    config.budget_mode()
    curves, _, _ = compute_curves(model, grads, config,
                                  use_cache=not args.no_cache)
    alloc = allocate(model, curves, config)
    dump_json(alloc.to_dict(), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_prune(args) -> int:
    model = _load_model(args.model)
    grads = _load_grads(args.grads)
    calib = _load_calib(args.calib) if args.calib else None
    config = _config_from(args)
    config.budget_mode()
    outcome = run_prune(model, grads, config, calib=calib)
    os.makedirs(args.out_dir, exist_ok=True)
    pruned_path = os.path.join(args.out_dir, "pruned.dmb")
    report_path = os.path.join(args.out_dir, "report.json")
    save_bundle(outcome.pruned, pruned_path,
                masks=list(outcome.masks.values()))
    dump_json(outcome.report, report_path)
    print(f"wrote {pruned_path}")
    print(f"wrote {report_path}")
    return 0


def cmd_eval(args) -> int:
    dense = _load_model(args.dense)
    pruned = _load_model(args.pruned)
    spec, dense_params = _refnet_pair(dense, args.dense)
    _, pruned_params = _refnet_pair(pruned, args.pruned)
    if args.calib:
        calib = _load_calib(args.calib)
    else:
        calib = rn.synth_calibration(spec, 16, args.seed + 1)
    td = rn.true_distortion(spec, dense_params, pruned_params, calib,
                            lam=(args.lambda_b, args.lambda_c))
    sys.stdout.write(dump_json({"true_distortion": td}))
    return 0


def cmd_sweep(args) -> int:
    model = _load_model(args.model)
    grads = _load_grads(args.grads)
    calib = _load_calib(args.calib) if args.calib else None
    try:
        ratios = [float(tok) for tok in args.ratios.split(",") if tok]
    except ValueError:
        raise BundleError(f"bad ratio list: {args.ratios!r}") from None
    if not ratios:
        raise BundleError("empty ratio list")
    config = _config_from(args)
    rows = pareto_sweep(model, grads, ratios, config, calib=calib)
    write_csv(args.out, SWEEP_HEADER,
              [(r["R"], r["achieved_ratio"], r["total_delta"],
                r["true_distortion"]) for r in rows])
    print(f"wrote {args.out}")
    return 0


def cmd_verify(args) -> int:
    from . import acceptance

    if args.model or args.grads:
        if not (args.model and args.grads):
            raise BundleError("verify needs both --model and --grads")
        results = acceptance.verify_files(args.model, args.grads)
    else:
        results = acceptance.run_all(seed=args.seed, threads=args.threads,
                                     artifacts_dir=args.artifacts)
    ok = True
    for res in results:
        ok &= res.passed
        print(acceptance.format_result(res))
    if ok:
        print(f"all {len(results)} checks passed")
        return 0
    return VERIFY_EXIT


def _add_common(p, *, cache=False):
    p.add_argument("--seed", type=int, default=42,
                   help="base RNG seed (default 42)")
    p.add_argument("--threads", type=int, default=None,
                   help="work pool size (default: available parallelism)")
    if cache:
        p.add_argument("--cache-dir", default=None,
                       help="curve cache location (or DMPRUNE_CACHE_DIR)")
        p.add_argument("--no-cache", action="store_true",
                       help="recompute curves, skip the cache")


def _add_curve_knobs(p):
    p.add_argument("--k", type=int, default=20,
                   help="grid points per layer (default 20)")
    p.add_argument("--delta-mode", choices=("squared", "abs"),
                   default="squared")
    p.add_argument("--kappa", default="auto",
                   help="Fisher damping: 'auto' or a float")
    p.add_argument("--fisher", choices=("dense", "factor"), default="factor",
                   help="Fisher representation (default factor)")


def _add_budget(p):
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--flops-ratio", type=float, default=None,
                     help="kept-FLOPs fraction R in (0, 1]")
    grp.add_argument("--prune-count", type=int, default=None,
                     help="total weights to prune across layers")
    p.add_argument("--quantum", type=float, default=None,
                   help="FLOPs quantization step (default: auto)")


def build_parser() -> _Parser:
    parser = _Parser(prog="dmprune",
                     description="Distortion-guided post-training pruning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("demo-export",
                       help="emit a seeded refnet model + calibration DMB")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--n-calib", type=int, default=16,
                   help="calibration sample count (default 16)")
    _add_common(p)
    p.set_defaults(func=cmd_demo_export)

    p = sub.add_parser("grad",
                       help="calibration gradients for a refnet bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--out", default="grads.dmb")
    p.add_argument("--lambda-b", type=float, default=1.0,
                   help="box head weight in the scalarized output")
    p.add_argument("--lambda-c", type=float, default=1.0,
                   help="confidence head weight in the scalarized output")
    p.add_argument("--probe-seed", type=int, default=None,
                   help="use a random probe u = v.y instead of the "
                        "lambda-weighted sum")
    _add_common(p)
    p.set_defaults(func=cmd_grad)

    p = sub.add_parser("curves", help="per-layer distortion curves to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--grads", required=True)
    p.add_argument("--out", default="curves.csv")
    _add_curve_knobs(p)
    _add_common(p, cache=True)
    p.set_defaults(func=cmd_curves)

    p = sub.add_parser("allocate",
                       help="optimal per-layer prune counts under a budget")
    p.add_argument("--model", required=True)
    p.add_argument("--grads", required=True)
    p.add_argument("--out", default="allocation.json")
    _add_budget(p)
    _add_curve_knobs(p)
    _add_common(p, cache=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("prune",
                       help="run the full pipeline, write pruned DMB + report")
    p.add_argument("--model", required=True)
    p.add_argument("--grads", required=True)
    p.add_argument("--calib", default=None,
                   help="calibration DMB for self-distillation finetuning")
    p.add_argument("--out-dir", default="pruned-out")
    p.add_argument("--finetune-epochs", type=int, default=0)
    p.add_argument("--finetune-lr", type=float, default=0.1)
    p.add_argument("--no-timestamps", action="store_true",
                   help="zero wall-clock fields for byte-stable reports")
    _add_budget(p)
    _add_curve_knobs(p)
    _add_common(p, cache=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval",
                       help="true distortion between dense and pruned refnets")
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--calib", default=None,
                   help="calibration DMB (default: synthesized from --seed)")
    p.add_argument("--lambda-b", type=float, default=1.0)
    p.add_argument("--lambda-c", type=float, default=1.0)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep",
                       help="allocation quality across FLOPs budgets to CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--grads", required=True)
    p.add_argument("--calib", default=None)
    p.add_argument("--ratios", default="0.9,0.7,0.5,0.3",
                   help="comma-separated kept-FLOPs ratios")
    p.add_argument("--out", default="sweep.csv")
    _add_curve_knobs(p)
    _add_common(p, cache=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify",
                       help="run the oracle suite (or validate a bundle pair)")
    p.add_argument("--model", default=None,
                   help="with --grads: validate this bundle pair instead")
    p.add_argument("--grads", default=None)
    p.add_argument("--artifacts", default=None,
                   help="directory for archived check tables")
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits on usage errors and --help; keep its code but
        # return it so in-process callers get an int back
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return args.func(args)
    except BundleError as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
