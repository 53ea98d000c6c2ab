"""Write the bundled toy detector checkpoint and a calibration array.

The checkpoint is deterministic in --seed, so regenerating it reproduces
the same bytes as long as the torch version's initializers are unchanged.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from dmb_exporter import save_toy_checkpoint, toy_calibration


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="toy-out")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-calib", type=int, default=8)
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "toy.pt")
    calib = os.path.join(args.out, "calib.npy")
    save_toy_checkpoint(ckpt, seed=args.seed)
    np.save(calib, toy_calibration(args.n_calib, seed=args.seed + 1))
    print(f"wrote {ckpt}")
    print(f"wrote {calib}")
    print(f"next: dmb-export export --ckpt {ckpt} --layers 'trunk.*' "
          f"--layers '*_head' --calib {calib} --out {args.out}/bundles")


if __name__ == "__main__":
    main()
