"""Command line entry: export a checkpoint + calibration set to DMB files."""

from __future__ import annotations

import argparse
import sys

from .dmb import ExportError
from .export import export_checkpoint, load_calibration_file
from .toy import load_checkpoint

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def build_parser() -> _Parser:
    parser = _Parser(prog="dmb-export",
                     description="export checkpoint weights and calibration "
                                 "gradients as DMB bundles")
    sub = parser.add_subparsers(dest="command")
    p = sub.add_parser("export", help="write model.dmb and grads.dmb")
    p.add_argument("--ckpt", required=True, help="torch checkpoint path")
    p.add_argument("--layers", action="append", required=True,
                   metavar="GLOB",
                   help="layer name pattern (repeatable)")
    p.add_argument("--calib", required=True,
                   help="calibration inputs (.dmb calibration bundle or .npy)")
    p.add_argument("--lambda-b", type=float, default=1.0)
    p.add_argument("--lambda-c", type=float, default=1.0)
    p.add_argument("--n", type=int, default=None,
                   help="use only the first N calibration samples")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> int:
    model = load_checkpoint(args.ckpt)
    inputs = load_calibration_file(args.calib)
    model_path, grads_path = export_checkpoint(
        model, args.layers, inputs, (args.lambda_b, args.lambda_c),
        args.out, n=args.n,
        meta={"source_checkpoint": str(args.ckpt)})
    print(f"wrote {model_path}")
    print(f"wrote {grads_path}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        return args.func(args)
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
