"""Test BA as a function of the number of target examples per class.

    python3 scripts/kshot.py --ks 0 1 5 10 15 --variant full

k=0 skips adaptation and evaluates the source-trained model.
"""

import argparse

import numpy as np

from metaadapt.algorithm import VARIANTS
from metaadapt.pipeline import run_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--ks", type=int, nargs="+", default=[0, 1, 5, 10, 15])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variant", choices=VARIANTS, default="full")
    args = ap.parse_args()

    for k in args.ks:
        bas = [run_benchmark(seed, args.variant, k).test.ba for seed in args.seeds]
        print(f"k={k:3d} mean BA {np.mean(bas):.4f}  per seed {' '.join(f'{b:.3f}' for b in bas)}", flush=True)


if __name__ == "__main__":
    main()
