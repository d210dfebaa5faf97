"""Pick (alpha0, beta0, tau) by validation BA on seeds disjoint from the evaluation seeds.

    python3 scripts/select_hparams.py --variant full --seeds 100 101 102 103 104

Validation BA is the best BA seen during model selection; test BA is printed
for reference only and is not used to choose.
"""

import argparse
import itertools

import numpy as np

from metaadapt.algorithm import VARIANTS
from metaadapt.pipeline import run_benchmark, synthetic_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--variant", choices=VARIANTS, default="full")
    ap.add_argument("--seeds", type=int, nargs="+", default=[100, 101, 102, 103, 104])
    ap.add_argument("--alpha0", type=float, nargs="+", default=[0.01, 0.1, 1.0])
    ap.add_argument("--beta0", type=float, nargs="+", default=[1e-2, 1e-3])
    ap.add_argument("--tau", type=float, nargs="+", default=[1.0, 0.1, 0.01])
    args = ap.parse_args()

    data = {seed: synthetic_benchmark(seed) for seed in args.seeds}
    results = []
    for a0, b0, tau in itertools.product(args.alpha0, args.beta0, args.tau):
        valid, test = [], []
        for seed in args.seeds:
            out = run_benchmark(seed, args.variant, data=data[seed], alpha0=a0, beta0=b0, tau=tau)
            valid.append(max(m.ba for _, m in out.result.history))
            test.append(out.test.ba)
        results.append((np.mean(valid), a0, b0, tau, np.mean(test)))
        print(f"alpha0={a0:g} beta0={b0:g} tau={tau:g} valid BA {np.mean(valid):.4f} (test {np.mean(test):.4f})", flush=True)
    best = max(results, key=lambda r: r[0])
    print(f"\nselected alpha0={best[1]:g} beta0={best[2]:g} tau={best[3]:g} (valid BA {best[0]:.4f})")


if __name__ == "__main__":
    main()
