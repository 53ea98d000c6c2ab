"""Regenerate the frozen reference outputs under tests/golden/.

Run after any deliberate numerics change, then review the diff by hand:
these files define what "unchanged behavior" means for test_golden.py.
"""

import hashlib
import os
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from dmprune import cli
from dmprune import refnet as rn
from dmprune.model_ir import dump_json, write_csv
from dmprune.pipeline import SWEEP_HEADER, PruneConfig, pareto_sweep

GOLDEN = os.path.join(os.path.dirname(__file__), "..", "tests", "golden")
SWEEP_RATIOS = (0.9, 0.7, 0.5, 0.3)


def sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def main():
    os.makedirs(GOLDEN, exist_ok=True)
    spec = rn.default_spec()
    params = rn.init_params(spec, 42)

    x = np.random.default_rng(7).standard_normal(spec.in_shape)
    pb, pc = rn.forward(spec, params, x)
    dump_json({"seed_params": 42, "seed_input": 7,
               "p_b": [[v for v in row] for row in pb],
               "p_c": [[v for v in row] for row in pc]},
              os.path.join(GOLDEN, "forward_golden.json"))

    with tempfile.TemporaryDirectory() as tmp:
        assert cli.main(["demo-export", "--out", tmp, "--seed", "42"]) == 0
        hashes = {
            "model42.dmb": sha256(os.path.join(tmp, "model.dmb")),
            "calib16_seed43.dmb": sha256(os.path.join(tmp, "calib.dmb")),
        }
    dump_json(hashes, os.path.join(GOLDEN, "bundle_hashes.json"))

    calib = rn.synth_calibration(spec, 16, 43)
    model = rn.to_model_bundle(spec, params, seed=42)
    grads = rn.build_gradient_bundle(spec, params, calib)
    with tempfile.TemporaryDirectory() as tmp:
        config = PruneConfig(flops_ratio=0.5, seed=42, cache_dir=tmp)
        rows = pareto_sweep(model, grads, SWEEP_RATIOS, config, calib=calib)
    write_csv(os.path.join(GOLDEN, "sweep_golden.csv"), SWEEP_HEADER,
              [(r["R"], r["achieved_ratio"], r["total_delta"],
                r["true_distortion"]) for r in rows])

    for name in ("forward_golden.json", "bundle_hashes.json",
                 "sweep_golden.csv"):
        print(f"wrote {os.path.join(GOLDEN, name)}")


if __name__ == "__main__":
    main()
