"""End-to-end demo: export the reference net, prune it at several FLOPs
budgets, finetune the midpoint, and print the resulting distortions.

Everything goes through the CLI so this doubles as a smoke test of the
command surface. Outputs land in ./demo-out (override with --out).
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dmprune import cli


def sh(argv):
    print(f"$ dmprune {' '.join(argv)}")
    code = cli.main(argv)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="demo-out")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    d = args.out
    cache = ["--cache-dir", os.path.join(d, "cache")]

    sh(["demo-export", "--out", d, "--seed", str(args.seed)])
    model = os.path.join(d, "model.dmb")
    calib = os.path.join(d, "calib.dmb")
    grads = os.path.join(d, "grads.dmb")
    sh(["grad", "--model", model, "--calib", calib, "--out", grads])
    sh(["curves", "--model", model, "--grads", grads,
        "--out", os.path.join(d, "curves.csv")] + cache)
    sh(["sweep", "--model", model, "--grads", grads, "--calib", calib,
        "--ratios", "0.9,0.7,0.5,0.3", "--out",
        os.path.join(d, "sweep.csv")] + cache)
    sh(["prune", "--model", model, "--grads", grads, "--calib", calib,
        "--flops-ratio", "0.5", "--finetune-epochs", "50",
        "--out-dir", os.path.join(d, "pruned-ft")] + cache)
    sh(["eval", "--dense", model, "--pruned",
        os.path.join(d, "pruned-ft", "pruned.dmb"), "--calib", calib])
    print()

    with open(os.path.join(d, "pruned-ft", "report.json")) as f:
        report = json.load(f)
    print("sweep (R, achieved, predicted delta, true distortion):")
    with open(os.path.join(d, "sweep.csv")) as f:
        next(f)
        for line in f:
            r, a, td, true = line.strip().split(",")
            print(f"  R={float(r):.1f}  achieved={float(a):.4f}  "
                  f"delta={float(td):.6f}  true={float(true):.6f}")
    counts = {e["name"]: e["k"] for e in report["allocation"]["layers"]}
    print(f"half-FLOPs allocation (pruned counts): {counts}")
    ft = report["diagnostics"]["finetune"]
    print(f"finetune: loss {ft['loss_first']:.4f} -> {ft['loss_last']:.4f} "
          f"over {ft['epochs']} epochs")


if __name__ == "__main__":
    main()
