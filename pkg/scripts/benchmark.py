"""Variant comparison on the synthetic domain-shift benchmark.

    python3 scripts/benchmark.py --seeds 0 1 2 3 4 --variants full maml naive_finetune
    python3 scripts/benchmark.py --variants full no_similarity no_adaptive_lr first_order

Prints per-seed test BA and the mean per variant; --out writes a long-format CSV.
"""

import argparse
import csv
import time

import numpy as np

from metaadapt.algorithm import VARIANTS
from metaadapt.pipeline import run_benchmark, synthetic_benchmark


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", choices=VARIANTS, default=["full", "maml", "naive_finetune"])
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--tau", type=float)
    ap.add_argument("--alpha0", type=float)
    ap.add_argument("--beta0", type=float)
    ap.add_argument("--iters", type=int)
    ap.add_argument("--out")
    args = ap.parse_args()
    meta = {k: v for k, v in (("tau", args.tau), ("alpha0", args.alpha0), ("beta0", args.beta0), ("n_iters", args.iters)) if v is not None}

    rows = []
    ba = {v: [] for v in args.variants}
    for seed in args.seeds:
        data = synthetic_benchmark(seed, args.k)
        for variant in args.variants:
            t0 = time.perf_counter()
            out = run_benchmark(seed, variant, args.k, data=data, **meta)
            m = out.test
            ba[variant].append(m.ba)
            rows.append([seed, variant, out.result.best_iter, m.ba, m.acc, m.f1, m.n])
            print(f"seed={seed} {variant:15s} ba={m.ba:.4f} acc={m.acc:.4f} f1={m.f1:.4f} "
                  f"best_iter={out.result.best_iter} ({time.perf_counter() - t0:.1f}s)", flush=True)

    print("\nmean test BA over seeds", args.seeds)
    for variant, vals in ba.items():
        print(f"  {variant:15s} {np.mean(vals):.4f} +- {np.std(vals):.4f}")

    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "variant", "best_iter", "ba", "acc", "f1", "n"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
