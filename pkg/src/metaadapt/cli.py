"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data or I/O error,
3 numeric error, 4 gradient check above tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .algorithm import VARIANTS, ConfigError
from .autodiff import NumericError, StructuralError
from .checkpoint import CheckpointError, load_params
from .data import DataError, SynthConfig, load_jsonl, preprocess, synth_shift_generate, write_jsonl
from .metrics import report_csv
from .model import ModelSpec
from . import pipeline
from .pipeline import RunConfig

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 1, 2, 3, 4
GRADCHECK_TOL = 1e-4

log = logging.getLogger("metaadapt")

# flag dest -> (config section, field); kebab-case field names plus short aliases
_OVERRIDES = {
    "source": ("paths", "source"),
    "target": ("paths", "target"),
    "out_dir": ("paths", "out_dir"),
    "k": ("split", "k"),
    "ratios": ("split", "ratios"),
    "hash_dim": ("model", "hash_dim"),
    "hidden_dim": ("model", "hidden_dim"),
    "ngram_orders": ("model", "ngram_orders"),
    "n_tasks": ("meta", "n_tasks"),
    "inner_steps": ("meta", "inner_steps"),
    "alpha0": ("meta", "alpha0"),
    "beta0": ("meta", "beta0"),
    "tau": ("meta", "tau"),
    "n_iters": ("meta", "n_iters"),
    "validate_every": ("meta", "validate_every"),
    "task_batch": ("meta", "task_batch"),
    "variant": ("meta", "variant"),
    "weight_decay": ("meta", "weight_decay"),
    "seed": ("meta", "seed"),
    "warm_start": ("meta", "warm_start"),
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--out-dir")
    p.add_argument("--k", type=int)
    p.add_argument("--ratios", type=float, nargs=3)
    p.add_argument("--hash-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--ngram-orders", type=int, nargs="+")
    p.add_argument("--n-tasks", "--tasks", dest="n_tasks", type=int)
    p.add_argument("--inner-steps", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--beta0", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--n-iters", "--iters", dest="n_iters", type=int)
    p.add_argument("--validate-every", type=int)
    p.add_argument("--task-batch", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--warm-start", dest="warm_start", action=argparse.BooleanOptionalAction, default=None)


def resolve_config(args) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    d = base.to_dict()
    for dest, (section, name) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            d[section][name] = list(value) if isinstance(value, (list, tuple)) else value
    return RunConfig.from_dict(d)


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_adapt(args) -> int:
    cfg = resolve_config(args)
    if not cfg.paths.source or not cfg.paths.target:
        raise ConfigError("both --source and --target are required")
    outcome = pipeline.adapt(cfg)
    m = outcome.test
    print(f"best_iter={outcome.result.best_iter} ba={m.ba:.4f} acc={m.acc:.4f} f1={m.f1:.4f} n={m.n}")
    return 0


def cmd_gradcheck(args) -> int:
    spec = ModelSpec(hash_dim=args.hash_dim, hidden_dim=args.hidden_dim)
    report = pipeline.gradcheck(
        spec,
        inner_steps=args.inner_steps,
        task_batch=args.task_batch,
        k=args.k,
        alpha0=args.alpha0,
        mode=args.mode,
        n_draws=args.draws,
        seed=args.seed,
    )
    for i, err in enumerate(report.errors):
        print(f"draw {i}: relative error {err:.3e}")
    ok = report.max_error <= GRADCHECK_TOL
    print(f"params={report.n_params} mode={args.mode} max_relative_error={report.max_error:.3e} "
          f"{'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return 0 if ok else EXIT_CHECK


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        vocab_size=args.vocab_size,
        overlap=args.overlap,
        n_source=args.n_source,
        n_target=args.n_target,
        target_pos_rate=args.target_pos_rate,
        seed=args.seed,
    )
    source, target = synth_shift_generate(cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(source, out / "source.jsonl")
    write_jsonl(target, out / "target.jsonl")
    print(f"wrote {len(source)} source and {len(target)} target examples to {out}")
    return 0


def _parse_grid(items) -> dict[str, list]:
    grid: dict[str, list] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} must look like name=v1,v2,...")
        name, values = item.split("=", 1)
        conv = int if name == "k" else float
        try:
            grid[name.replace("-", "_")] = [conv(v) for v in values.split(",") if v]
        except ValueError:
            raise ConfigError(f"bad values in grid entry {item!r}") from None
    return grid


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    grid = _parse_grid(args.grid)
    if args.grid_file:
        with open(args.grid_file, encoding="utf-8") as fh:
            grid.update(json.load(fh))
    pipeline.grid_points(grid)  # validate axes before running anything
    rows = pipeline.sweep(cfg, grid)
    print(f"{len(rows)} grid points -> {Path(cfg.paths.out_dir) / 'sweep.csv'}")
    return 0


def cmd_eval(args) -> int:
    params, model_d = load_params(args.params)
    if args.config:
        spec = RunConfig.load(args.config).model
    elif model_d:
        spec = ModelSpec(**{**model_d, "ngram_orders": tuple(model_d.get("ngram_orders", (1, 2)))})
    else:
        raise ConfigError("checkpoint has no model description; pass --config")
    ds = load_jsonl(args.data).map_text(preprocess)
    if len(ds) == 0:
        raise DataError(f"{args.data} is empty")
    enc = pipeline.encode(ds, spec)
    m = pipeline.evaluate(params, enc.features, enc.labels)
    print(f"ba={m.ba:.4f} acc={m.acc:.4f} f1={m.f1:.4f} n={m.n}")
    if args.out:
        report_csv([(0, m)], args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaadapt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("adapt", help="run one adaptation experiment")
    _add_run_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("gradcheck", help="check meta gradients against finite differences")
    p.add_argument("--hash-dim", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=4)
    p.add_argument("--inner-steps", type=int, default=3)
    p.add_argument("--task-batch", type=int, default=4)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--alpha0", type=float, default=0.5)
    p.add_argument("--mode", choices=("second_order", "first_order"), default="second_order")
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic source/target corpus pair")
    defaults = SynthConfig()
    p.add_argument("--vocab-size", type=int, default=defaults.vocab_size)
    p.add_argument("--overlap", type=float, default=defaults.overlap)
    p.add_argument("--n-source", type=int, default=defaults.n_source)
    p.add_argument("--n-target", type=int, default=defaults.n_target)
    p.add_argument("--target-pos-rate", type=float, default=defaults.target_pos_rate)
    p.add_argument("--seed", type=int, default=defaults.seed)
    p.add_argument("--out-dir", default="data/synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep", help="run adapt over a hyperparameter grid")
    _add_run_flags(p)
    p.add_argument("--grid", action="append", metavar="NAME=V1,V2", help="axis among tau, alpha0, beta0, k")
    p.add_argument("--grid-file", help="JSON object mapping axis names to value lists")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on a JSONL dataset")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", help="optional CSV path for the metrics")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, StructuralError) as exc:
        return _fail(EXIT_CONFIG, f"config: {exc}")
    except (DataError, CheckpointError, OSError) as exc:
        return _fail(EXIT_DATA, f"data: {exc}")
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, f"numeric: {exc}")
    except ValueError as exc:
        return _fail(EXIT_CONFIG, f"config: {exc}")


if __name__ == "__main__":
    sys.exit(main())
