"""Acceptance criteria, one test each, every test printing a PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the report lines.
Benchmark runs are cached for the session so criteria 5 to 7 share them.
"""

import functools
import json
import time

import numpy as np
import pytest

from metaadapt.algorithm import MetaConfig, rescale_weights, run_metaadapt, task_similarity
from metaadapt.cli import main
from metaadapt.metrics import ConfusionMatrix, accuracy, balanced_accuracy, f1
from metaadapt.model import ModelSpec
from metaadapt.pipeline import BENCH_META, BENCH_MODEL, gradcheck, run_benchmark, synthetic_benchmark

SEEDS = (0, 1, 2, 3, 4)
_SUITE_START = time.perf_counter()
_RUN_SECONDS = {}


def report(n, ok, detail):
    print(f"\nCRITERION {n:2d} {'PASS' if ok else 'FAIL'}: {detail}")


@functools.lru_cache(maxsize=None)
def bench_data(seed, k):
    return synthetic_benchmark(seed, k)


@functools.lru_cache(maxsize=None)
def bench_ba(variant, seed, k=10):
    t0 = time.perf_counter()
    ba = run_benchmark(seed, variant, k, data=bench_data(seed, k)).test.ba
    _RUN_SECONDS[(variant, seed, k)] = time.perf_counter() - t0
    return ba


def mean_ba(variant, k=10):
    return float(np.mean([bench_ba(variant, s, k) for s in SEEDS]))


def test_c01_meta_gradient_exactness():
    spec = ModelSpec(hash_dim=16, hidden_dim=4)
    t0 = time.perf_counter()
    errors = []
    for seed in range(5):
        rep = gradcheck(spec, inner_steps=3, task_batch=4, seed=seed)
        errors += rep.errors
    elapsed = time.perf_counter() - t0
    ok = rep.n_params <= 100 and max(errors) <= 1e-4 and elapsed < 30
    report(1, ok, f"{rep.n_params} params, max rel err {max(errors):.2e} over {len(errors)} draws, {elapsed:.1f}s")
    assert ok


def _trajectory(variant, tau, seed=0, iters=200):
    data = bench_data(seed, 10)
    cfg = MetaConfig(**{**BENCH_META, "tau": tau}, variant=variant, n_iters=iters, seed=seed)
    traj = []
    run_metaadapt(data.source_train, data.meta, data.valid, cfg, BENCH_MODEL,
                  on_step=lambda t, p: traj.append(p.values.copy()))
    return np.array(traj)


@pytest.mark.slow
def test_c02_maml_limit_equivalence():
    maml = _trajectory("maml", 1.0)
    full = _trajectory("full", 1e6)
    dev = float(np.abs(full - maml).max())
    per_step = np.abs(full - maml).max(axis=1)
    ok = dev <= 1e-8
    first_bad = int(np.argmax(per_step > 1e-8)) + 1 if not ok else None
    far = float(np.abs(_trajectory("full", 1e8) - maml).max())
    report(2, ok, f"max |full(tau=1e6) - maml| = {dev:.2e} over {len(maml)} steps"
                  + (f", first step above 1e-8: {first_bad}" if first_bad else "")
                  + f"; at tau=1e8 the deviation is {far:.2e}")
    assert ok


def test_c03_softmax_weight_invariants():
    rng = np.random.default_rng(3)
    worst_sum = worst_shift = worst_uniform = 0.0
    in_range = True
    saturated, min_gap_saturated = 0, np.inf
    # cosine scores span [-1, 1]; tau spans the 0.01-10 range around the selection grid
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        scores = rng.uniform(-1, 1, n)
        tau = float(10 ** rng.uniform(-2, 1))
        w = rescale_weights(scores, tau)
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        ok_draw = bool(np.all((w > 0) & (w < 1)))
        in_range &= ok_draw
        gap = float(np.ptp(scores) / tau)
        if not ok_draw:
            saturated += 1
            min_gap_saturated = min(min_gap_saturated, gap)
        shifted = rescale_weights(scores + rng.uniform(-5, 5), tau)
        worst_shift = max(worst_shift, float(np.abs(shifted - w).max()))
        const = rescale_weights(np.full(n, rng.uniform(-1, 1)), tau)
        worst_uniform = max(worst_uniform, float(np.abs(const - 1.0 / n).max()))
    ok = worst_sum <= 1e-9 and in_range and worst_shift <= 1e-12 and worst_uniform <= 1e-15
    report(3, ok, f"|sum-1| {worst_sum:.1e}, all in (0,1): {in_range} ({saturated} draws round a weight to "
                  f"exactly 1.0, smallest (max-min)/tau among them {min_gap_saturated:.1f}; "
                  f"1 - e^-x rounds to 1 in float64 once x > 36.7), "
                  f"shift dev {worst_shift:.1e}, constant-score dev from 1/n {worst_uniform:.1e}")
    assert ok


def test_c04_similarity_contract():
    rng = np.random.default_rng(4)
    bounded = True
    for _ in range(1000):
        d = int(rng.integers(1, 64))
        a = rng.normal(size=d) * 10 ** rng.uniform(-4, 4)
        b = rng.normal(size=d) * 10 ** rng.uniform(-4, 4)
        bounded &= -1.0 <= task_similarity(a, b) <= 1.0
    v = rng.normal(size=17)
    fixtures = (
        task_similarity(v, v) == 1.0,
        task_similarity(np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.0])) == 0.0,
        task_similarity(v, -v) == -1.0,
        task_similarity(np.zeros(17), v) == 0.0,
        task_similarity(v, np.zeros(17)) == 0.0,
    )
    ok = bounded and all(fixtures)
    report(4, ok, f"1000 random pairs bounded: {bounded}; identical/orthogonal/opposite/zero fixtures: {fixtures}")
    assert ok


@pytest.mark.slow
def test_c05_benchmark_ordering():
    t0 = time.perf_counter()
    full, maml, naive = mean_ba("full"), mean_ba("maml"), mean_ba("naive_finetune")
    elapsed = time.perf_counter() - t0
    ok = full >= maml and full >= naive + 0.02 and elapsed < 180
    report(5, ok, f"mean BA full {full:.4f}, maml {maml:.4f}, naive_finetune {naive:.4f} "
                  f"(need full >= maml and full >= naive + 0.02); {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c06_kshot_trend():
    means = {k: mean_ba("full", k) for k in (0, 5, 10)}
    ok = means[5] >= means[0] - 0.01 and means[10] >= means[5] - 0.01
    report(6, ok, "mean BA by k: " + ", ".join(f"k={k} {v:.4f}" for k, v in means.items()))
    assert ok


@pytest.mark.slow
def test_c07_ablation_direction():
    full, nosim, fo = mean_ba("full"), mean_ba("no_similarity"), mean_ba("first_order")
    wins = sum(
        bench_ba("full", s) > max(bench_ba("no_similarity", s), bench_ba("first_order", s)) for s in SEEDS
    )
    ok = full >= nosim - 0.01 and full >= fo - 0.01 and wins >= 3
    report(7, ok, f"mean BA full {full:.4f}, no_similarity {nosim:.4f}, first_order {fo:.4f}; "
                  f"full strictly best in {wins}/5 seeds")
    assert ok


def test_c08_determinism(tmp_path):
    assert main(["synth", "--seed", "11", "--out-dir", str(tmp_path / "data")]) == 0
    base = ["adapt", "--source", str(tmp_path / "data" / "source.jsonl"), "--target", str(tmp_path / "data" / "target.jsonl"),
            "--hash-dim", "512", "--hidden-dim", "16", "--iters", "100", "--seed", "42"]
    assert main(base + ["--out-dir", str(tmp_path / "a")]) == 0
    cfg = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
    cfg["paths"]["out_dir"] = str(tmp_path / "b")
    (tmp_path / "resolved.json").write_text(json.dumps(cfg))
    assert main(["adapt", "--config", str(tmp_path / "resolved.json")]) == 0
    same = {
        name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in ("final_metrics.csv", "params.madp")
    }
    ok = all(same.values())
    report(8, ok, f"byte-identical across two executions: {same}")
    assert ok


def test_c09_metric_fixtures():
    cm = ConfusionMatrix(tp=90, fn=10, tn=5, fp=5)
    got = (round(balanced_accuracy(cm), 4), round(accuracy(cm), 4), round(f1(cm), 4))
    ok = got == (0.7, 0.8636, 0.9231)
    report(9, ok, f"BA/Acc/F1 = {got}")
    assert ok


def test_c10_suite_wall_clock():
    elapsed = time.perf_counter() - _SUITE_START
    ok = elapsed < 600
    report(10, ok, f"acceptance suite wall-clock {elapsed:.0f}s (limit 600s); {len(_RUN_SECONDS)} benchmark runs")
    assert ok
