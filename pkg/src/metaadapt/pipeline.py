"""End-to-end runs: data preparation, adaptation, reporting, gradient checks, sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .algorithm import (
    ConfigError,
    MetaConfig,
    RunResult,
    inner_update,
    batch_loss,
    meta_gradient,
    run_metaadapt,
)
from .autodiff import NumericError, finite_diff_gradient, relative_error
from .checkpoint import save_params
from .data import (
    Batch,
    Dataset,
    DataError,
    MetaTask,
    SplitSpec,
    SynthConfig,
    encode,
    load_jsonl,
    preprocess,
    select_k_shot,
    split,
    synth_shift_generate,
)
from .metrics import Metrics, evaluate, report_csv
from .model import LR_SEGMENT, ModelSpec, init_params, loss_and_grad_numeric, loss_value

log = logging.getLogger(__name__)


@dataclass
class Paths:
    source: str = ""
    target: str = ""
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    meta: MetaConfig = field(default_factory=MetaConfig)

    def to_dict(self) -> dict:
        return {
            "paths": vars(self.paths).copy(),
            "split": self.split.to_dict(),
            "model": self.model.to_dict(),
            "meta": self.meta.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"paths", "split", "model", "meta"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            split_d = dict(d.get("split", {}))
            if "ratios" in split_d:
                split_d["ratios"] = tuple(split_d["ratios"])
            model_d = dict(d.get("model", {}))
            if "ngram_orders" in model_d:
                model_d["ngram_orders"] = tuple(model_d["ngram_orders"])
            return cls(
                paths=Paths(**d.get("paths", {})),
                split=SplitSpec(**split_d),
                model=ModelSpec(**model_d),
                meta=MetaConfig(**d.get("meta", {})),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None


def with_overrides(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Copy of ``cfg`` with fields of one section replaced (re-validated)."""
    try:
        return replace(cfg, **{section: replace(getattr(cfg, section), **values)})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


@dataclass
class Prepared:
    source_train: Batch
    meta: MetaTask
    valid: Batch
    test: Batch


def prepare(source: Dataset, target: Dataset, cfg: RunConfig) -> Prepared:
    """Preprocess, split both domains, take the k-shot set from the target validation split."""
    seed = cfg.meta.seed
    source = source.map_text(preprocess)
    target = target.map_text(preprocess)
    s_train, _, _ = split(source, cfg.split, seed)
    _, t_valid, t_test = split(target, cfg.split, seed)
    meta, rest = select_k_shot(t_valid, cfg.split.k, cfg.model)
    if len(s_train) < cfg.meta.task_batch:
        raise DataError(f"source training split has {len(s_train)} examples, fewer than task_batch={cfg.meta.task_batch}")
    if len(set(rest.labels.tolist())) < 2:
        raise DataError("target validation split (after k-shot selection) must contain both classes")
    if len(t_test) == 0:
        raise DataError("target test split is empty")
    return Prepared(encode(s_train, cfg.model), meta, encode(rest, cfg.model), encode(t_test, cfg.model))


@dataclass
class Outcome:
    result: RunResult
    test: Metrics


def run_prepared(data: Prepared, cfg: RunConfig, **kwargs) -> Outcome:
    result = run_metaadapt(data.source_train, data.meta, data.valid, cfg.meta, cfg.model, **kwargs)
    return Outcome(result, evaluate(result.best_params, data.test.features, data.test.labels))


def run_experiment(source: Dataset, target: Dataset, cfg: RunConfig, **kwargs) -> Outcome:
    return run_prepared(prepare(source, target, cfg), cfg, **kwargs)


# small enough for a 500-iteration run in a few seconds on one core
BENCH_MODEL = ModelSpec(hash_dim=512, hidden_dim=16)
# chosen by validation BA on seeds 100-104 (scripts/select_hparams.py); the
# same alpha0/beta0 came out best for full, maml and naive_finetune
BENCH_META = {"alpha0": 1.0, "beta0": 1e-3, "tau": 0.1}


def synthetic_benchmark(seed: int, k: int = 10, model: ModelSpec = BENCH_MODEL, **synth) -> Prepared:
    """Prepared splits of one synthetic source/target draw (generator seed = split seed)."""
    source, target = synth_shift_generate(SynthConfig(seed=seed, **synth))
    cfg = RunConfig(split=SplitSpec(k=k), model=model, meta=MetaConfig(seed=seed))
    return prepare(source, target, cfg)


def run_benchmark(seed: int, variant: str, k: int = 10, data: Prepared | None = None, **meta) -> Outcome:
    """One seeded synthetic-benchmark run; ``meta`` overrides MetaConfig fields."""
    data = data or synthetic_benchmark(seed, k)
    meta = {**BENCH_META, **meta}
    cfg = RunConfig(split=SplitSpec(k=k), model=BENCH_MODEL, meta=MetaConfig(seed=seed, variant=variant, **meta))
    return run_prepared(data, cfg)


def write_outputs(outcome: Outcome, cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report_csv(outcome.result.history, out / "history.csv")
    report_csv([(outcome.result.best_iter, outcome.test)], out / "final_metrics.csv")
    (out / "resolved_config.json").write_text(cfg.to_json(), encoding="utf-8")
    save_params(outcome.result.best_params, out / "params.madp", cfg.model.to_dict())


def adapt(cfg: RunConfig) -> Outcome:
    source = load_jsonl(cfg.paths.source)
    target = load_jsonl(cfg.paths.target)
    outcome = run_experiment(source, target, cfg)
    write_outputs(outcome, cfg, cfg.paths.out_dir)
    return outcome


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

MAX_GRADCHECK_PARAMS = 200


@dataclass
class GradcheckReport:
    errors: list[float]
    n_params: int

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0


def _random_batch(rng, n: int, dim: int, labels=None) -> Batch:
    x = rng.random((n, dim)) * (rng.random((n, dim)) < 0.5)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), x)
    y = rng.integers(0, 2, size=n) if labels is None else np.asarray(labels)
    return Batch(x, y)


def unrolled_meta_loss(theta: np.ndarray, params_like, task: Batch, meta: Batch, steps: int, lrs=None) -> float:
    """theta -> L(Alg(theta), meta) evaluated with plain arrays, no recorded graph."""
    layout = params_like.layout
    phi = params_like.with_values(theta)
    seg = layout[LR_SEGMENT]
    for j in range(steps):
        alpha = theta[seg.offset + j] if lrs is None else lrs[j]
        _, g = loss_and_grad_numeric(phi, task.features, task.labels)
        phi = phi.with_values(phi.values - alpha * g)
    return loss_value(phi, meta.features, meta.labels)


def gradcheck(
    model_spec: ModelSpec,
    inner_steps: int = 3,
    task_batch: int = 4,
    k: int = 2,
    alpha0: float = 0.5,
    mode: str = "second_order",
    n_draws: int = 5,
    seed: int = 0,
    step: float = 1e-5,
) -> GradcheckReport:
    """Compare meta gradients with central differences of the unrolled map."""
    n_params = model_spec.n_params(inner_steps)
    if n_params > MAX_GRADCHECK_PARAMS:
        raise ConfigError(f"gradcheck model has {n_params} parameters, limit is {MAX_GRADCHECK_PARAMS}")
    errors = []
    for draw in range(n_draws):
        rng = np.random.default_rng([seed, draw])
        theta = init_params(model_spec, int(rng.integers(2**31)), inner_steps, alpha0)
        # biases away from zero so no hidden unit sits exactly on the relu kink
        theta = theta.with_values(theta.values + np.where(_bias_mask(theta), rng.normal(0, 0.3, theta.values.size), 0))
        task = _random_batch(rng, task_batch, model_spec.hash_dim)
        meta = _random_batch(rng, 2 * k, model_spec.hash_dim, labels=[0] * k + [1] * k)
        trace = inner_update(theta, batch_loss(theta.layout, task), inner_steps)
        _, g = meta_gradient(trace, batch_loss(theta.layout, meta), mode)
        fd = finite_diff_gradient(
            lambda v: unrolled_meta_loss(v, theta, task, meta, inner_steps), theta.values, step
        )
        errors.append(relative_error(g.values, fd))
    return GradcheckReport(errors, n_params)


def _bias_mask(params) -> np.ndarray:
    mask = np.zeros(params.values.size, bool)
    for name in ("b1", "b2"):
        seg = params.layout[name]
        mask[seg.offset : seg.stop] = True
    return mask


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = {"tau": "meta", "alpha0": "meta", "beta0": "meta", "k": "split"}
SWEEP_HEADER = ["point", "tau", "alpha0", "beta0", "k", "status", "ba", "acc", "f1", "n"]


def grid_points(grid: dict[str, list]) -> list[dict]:
    unknown = set(grid) - set(SWEEP_AXES)
    if unknown:
        raise ConfigError(f"unknown sweep axes {sorted(unknown)}; allowed: {sorted(SWEEP_AXES)}")
    axes = [a for a in SWEEP_AXES if grid.get(a)]
    if not axes:
        return []
    return [dict(zip(axes, combo)) for combo in itertools.product(*(grid[a] for a in axes))]


def point_config(cfg: RunConfig, point: dict, out_dir) -> RunConfig:
    meta = {a: v for a, v in point.items() if SWEEP_AXES[a] == "meta"}
    out = cfg
    if meta:
        out = with_overrides(out, "meta", **meta)
    if "k" in point:
        out = with_overrides(out, "split", k=int(point["k"]))
    return with_overrides(out, "paths", out_dir=str(out_dir))


def sweep(cfg: RunConfig, grid: dict[str, list], runner=adapt) -> list[list]:
    """Run every grid point into its own subdirectory and write ``sweep.csv``."""
    root = Path(cfg.paths.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, point in enumerate(grid_points(grid)):
        sub = root / f"point_{i:03d}"
        row = [i] + [point.get(a, _base_value(cfg, a)) for a in ("tau", "alpha0", "beta0", "k")]
        try:
            pc = point_config(cfg, point, sub)
            out = runner(pc)
            m = out.test
            row += ["ok", f"{m.ba:.6f}", f"{m.acc:.6f}", f"{m.f1:.6f}", m.n]
        except (ConfigError, DataError, NumericError, OSError, ValueError) as exc:
            log.warning("sweep point %d failed: %s", i, exc)
            row += [f"error: {type(exc).__name__}: {exc}", "", "", "", ""]
        rows.append(row)
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    writer.writerows(rows)
    (root / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    return rows


def _base_value(cfg: RunConfig, axis: str):
    return getattr(cfg.split if axis == "k" else cfg.meta, axis)
