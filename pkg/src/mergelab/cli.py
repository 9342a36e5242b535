"""Command-line front end: merge, stats, cost, sweep, bench, time.

Exit codes:
  0  success
  1  unexpected failure
  2  invalid recipe, config or arguments
  3  missing prerequisite (base model, statistics, input file)
  4  I/O error (unreadable or corrupt container, unwritable output)

Data goes to stdout, diagnostics to stderr. Benchmark runs write a
``manifest.json`` next to their CSVs; ``--config manifest.json`` replays it,
with explicit flags taking precedence over values in the file. The only
environment variable read is ``MERGELAB_OUTPUT_DIR``, which replaces the
default output directory when ``--out-dir`` is not given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from mergelab import __version__, cost_model
from mergelab.checkpoint import ContainerError, read_container, write_container
from mergelab.merge.recipe import MergeRecipe, MissingPrerequisiteError, RecipeError

log = logging.getLogger("mergelab")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_MISSING = 3
EXIT_IO = 4

OUTPUT_DIR_ENV = "MERGELAB_OUTPUT_DIR"

SCENARIO_KEYS = (
    "n_domains",
    "n_tasks",
    "input_dim",
    "seed",
    "sigma",
    "domain_rank",
    "latent_dim",
    "output_dim",
    "spread",
    "n_train",
    "n_val",
    "n_test",
)


class UsageError(ValueError):
    """Bad flags or config values; maps to exit code 2."""


def _out_dir(flag: str | None) -> Path:
    """--out-dir flag, then MERGELAB_OUTPUT_DIR, then the current directory."""
    return Path(flag or os.environ.get(OUTPUT_DIR_ENV) or ".")


def _csv_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [s.strip() for s in text.split(",") if s.strip()]


def _load_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


# -- merge / time ----------------------------------------------------------


def _recipe_from_args(args) -> MergeRecipe:
    recipe = MergeRecipe.load(args.recipe)
    if getattr(args, "seed", None) is not None:
        recipe.seed = args.seed
    return recipe


def cmd_merge(args) -> int:
    recipe = _recipe_from_args(args)
    out = args.out or recipe.output
    if out is None:
        raise RecipeError("no output path: pass --out or set 'output' in the recipe")
    from mergelab.merge.driver import run_merge

    path = run_merge(recipe, out, threads=args.threads, strict=args.strict)
    print(path)
    return EXIT_OK


def cmd_time(args) -> int:
    recipe = _recipe_from_args(args)
    report = cost_model.time_merge(recipe, args.repeats)
    print(report.to_csv() if args.format == "csv" else report.to_json(), end="" if args.format == "csv" else "\n")
    return EXIT_OK


# -- stats -----------------------------------------------------------------


def cmd_stats(args) -> int:
    from mergelab.statistics import ToyModel, model_statistics

    for path in (args.model, args.data, args.base):
        if path is not None and not Path(path).is_file():
            raise MissingPrerequisiteError(f"stats: input file not found: {path}")
    params = read_container(args.model)
    data = read_container(args.data)
    if "inputs" not in data:
        raise UsageError(f"{args.data}: data container needs an 'inputs' tensor")
    layers = _csv_list(args.layers)
    if not layers:
        raise UsageError("--layers needs at least one layer name")
    loss = args.loss
    inputs = data["inputs"]
    labels = data.get("targets")
    if labels is not None and loss == "softmax":
        labels = np.asarray(labels).reshape(-1).astype(np.int64)
    try:
        model = ToyModel(layers, params, activation=args.activation, loss=loss)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.empirical and labels is None:
        raise UsageError("--empirical needs a 'targets' tensor in the data container")
    base = read_container(args.base) if args.base else None
    stats = model_statistics(
        model,
        inputs,
        labels=labels,
        fisher=not args.no_fisher,
        gram=not args.no_gram,
        base=base,
        k_fraction=args.k_fraction if base is not None else None,
        n_samples=args.fisher_samples,
        empirical=args.empirical,
        seed=args.seed if args.seed is not None else 0,
    )
    write_container(stats, args.out, strict=args.strict)
    print(args.out)
    return EXIT_OK


# -- cost ------------------------------------------------------------------


def cmd_cost(args) -> int:
    if args.method is None and not args.table:
        raise UsageError("pass --method or --table")
    if args.method is not None and args.method not in cost_model.METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(cost_model.METHODS)}")
    try:
        dims = cost_model.LayerDims(args.d, args.k, args.M, N=args.N, K=args.K, T=args.T)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.table:
        print(cost_model.cost_table_csv(dims), end="")
        return EXIT_OK
    try:
        merge = cost_model.merging_flops(args.method, dims)
    except cost_model.MissingDimensionError as exc:
        raise UsageError(str(exc)) from exc
    try:
        stats = cost_model.statistics_flops(args.method, dims)
    except cost_model.MissingDimensionError:
        stats = None
    if args.format == "json":
        print(json.dumps({"method": args.method, "merging_flops": merge, "statistics_flops": stats}))
    else:
        print(f"merging_flops {merge}")
        print(f"statistics_flops {'' if stats is None else stats}")
    return EXIT_OK


# -- sweep / bench ---------------------------------------------------------


def _bench_config(args, command: str) -> dict:
    """Resolve config: defaults < --config / --scenario file < flags."""
    from mergelab.bench.scaling import DEFAULT_REPEATS
    from mergelab.bench.sweep import SWEEP_GRID

    config = {
        "command": command,
        "scenario": {},
        "methods": list(SWEEP_GRID),
        "alpha": 1e-2,
        "seed": 0,
        "sweep": command == "sweep",
        "scaling": False,
        "m_min": 2,
        "m_max": None,
        "repeats": DEFAULT_REPEATS,
    }
    if args.config:
        replay = _load_json(args.config)
        unknown = set(replay) - set(config) - {"version", "outputs"}
        if unknown:
            raise UsageError(f"{args.config}: unknown key(s) {', '.join(sorted(unknown))}")
        config.update({k: v for k, v in replay.items() if k in config})
        config["command"] = command
    if args.scenario:
        config["scenario"] = _load_json(args.scenario)
    if args.methods is not None:
        config["methods"] = _csv_list(args.methods)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.alpha is not None:
        config["alpha"] = args.alpha
    if command == "bench":
        if args.sweep:
            config["sweep"] = True
        if args.scaling:
            config["scaling"] = True
        if args.m_min is not None:
            config["m_min"] = args.m_min
        if args.m_max is not None:
            config["m_max"] = args.m_max
        if args.repeats is not None:
            config["repeats"] = args.repeats
        if not (config["sweep"] or config["scaling"]):
            raise UsageError("bench needs --sweep and/or --scaling")
    unknown = set(config["scenario"]) - set(SCENARIO_KEYS)
    if unknown:
        raise UsageError(f"unknown scenario key(s): {', '.join(sorted(unknown))}")
    if not config["methods"]:
        raise UsageError("no methods given")
    return config


def _run_bench(config: dict, out_dir: Path, threads: int) -> dict[str, str]:
    from mergelab.bench import io as bench_io
    from mergelab.bench.scaling import scaling_experiment
    from mergelab.bench.scenario import generate_scenario, train_constituent
    from mergelab.bench.sweep import REFERENCE_METHODS, SWEEP_GRID, sweep

    try:
        scenario = generate_scenario(**config["scenario"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scenario config: {exc}") from exc
    for method in config["methods"]:
        if method not in SWEEP_GRID and method not in REFERENCE_METHODS:
            raise UsageError(f"unknown method {method!r}; choose from {', '.join(list(SWEEP_GRID) + list(REFERENCE_METHODS))}")
    constituents = [train_constituent(scenario, cell, config["alpha"]) for cell in scenario.held_in]
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, str] = {}
    if config["sweep"]:
        ta_lambda = None
        results = []
        merge_methods = [m for m in config["methods"] if m in SWEEP_GRID]
        for method in sorted(merge_methods, key=lambda m: m != "task_arithmetic"):
            res = sweep(method, scenario, constituents, ta_lambda=ta_lambda, seed=config["seed"])
            if method == "task_arithmetic":
                ta_lambda = res.best.value
            results.append(res)
        results.sort(key=lambda r: merge_methods.index(r.method))
        (out_dir / "sweep.csv").write_text(bench_io.sweep_csv(results), encoding="utf-8")
        written["sweep"] = "sweep.csv"
        for res in results:
            print(f"{res.method}\tbest_index={res.best_index}\tval_heldin={res.best.val_heldin:.6g}"
                  f"\ttest_heldin={res.best.test_heldin:.6g}\ttest_generalization={res.best.test_generalization:.6g}")
    if config["scaling"]:
        m_max = config["m_max"] or len(constituents)
        try:
            rows = scaling_experiment(
                scenario,
                config["methods"],
                range(config["m_min"], m_max + 1),
                config["repeats"],
                seed=config["seed"],
                alpha=config["alpha"],
                constituents=constituents,
                threads=threads,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        (out_dir / "scaling.csv").write_text(bench_io.scaling_csv(rows), encoding="utf-8")
        written["scaling"] = "scaling.csv"
        for row in rows:
            print(f"M={row.M}\t{row.method}\theldin={row.heldin_mean:.6g}\tgeneralization={row.generalization_mean:.6g}")
    return written


def cmd_bench(args) -> int:
    command = args.command
    config = _bench_config(args, command)
    out_dir = _out_dir(args.out_dir)
    written = _run_bench(config, out_dir, args.threads)
    from mergelab.bench import io as bench_io
    from mergelab.bench.scenario import generate_scenario

    manifest = dict(config)
    # record every scenario parameter so the run replays even if defaults change
    manifest["scenario"] = generate_scenario(**config["scenario"]).params
    manifest["version"] = __version__
    manifest["outputs"] = written
    (out_dir / "manifest.json").write_text(bench_io.manifest_json(manifest), encoding="utf-8")
    log.info("wrote %s to %s", ", ".join(sorted(written.values()) + ["manifest.json"]), out_dir)
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    common.add_argument("-q", "--quiet", action="store_true", help="only errors on stderr")
    common.add_argument("--seed", type=int, default=None, help="override the seed")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker thread cap")
    common.add_argument("--strict", action="store_true", help="refuse to write non-finite values")

    parser = argparse.ArgumentParser(prog="mergelab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"mergelab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", parents=[common], help="merge containers per a JSON recipe")
    p.add_argument("recipe")
    p.add_argument("--out", default=None, help="output container (default: recipe 'output')")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("time", parents=[common], help="time per-layer merges of a recipe")
    p.add_argument("recipe")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_time)

    p = sub.add_parser("stats", parents=[common], help="Fisher / Gram / trim statistics for a model")
    p.add_argument("model", help="model container")
    p.add_argument("--data", required=True, help="container with 'inputs' and optional 'targets'")
    p.add_argument("--layers", required=True, help="comma-separated layer names, input to output")
    p.add_argument("--out", required=True)
    p.add_argument("--loss", choices=("squared", "softmax"), default="squared")
    p.add_argument("--activation", choices=("tanh",), default=None)
    p.add_argument("--fisher-samples", type=_positive_int, default=1)
    p.add_argument("--empirical", action="store_true", help="use observed targets for the Fisher")
    p.add_argument("--no-fisher", action="store_true")
    p.add_argument("--no-gram", action="store_true")
    p.add_argument("--base", default=None, help="base container; adds trim masks")
    p.add_argument("--k-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("cost", parents=[common], help="analytic merging / statistics FLOPs")
    p.add_argument("--method", default=None)
    p.add_argument("--table", action="store_true", help="CSV for every method at these dims")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_cost)

    for name, help_text in (("sweep", "hyperparameter sweeps on the synthetic scenario"),
                            ("bench", "sweeps and/or scaling runs on the synthetic scenario")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--scenario", default=None, help="JSON scenario parameters")
        p.add_argument("--config", default=None, help="replay a manifest.json")
        p.add_argument("--methods", default=None, help="comma-separated methods")
        p.add_argument("--alpha", type=float, default=None, help="ridge strength for constituents")
        p.add_argument("--out-dir", default=None)
        if name == "bench":
            p.add_argument("--sweep", action="store_true")
            p.add_argument("--scaling", action="store_true")
            p.add_argument("--m-min", type=int, default=None)
            p.add_argument("--m-max", type=int, default=None)
            p.add_argument("--repeats", type=_positive_int, default=None)
        p.set_defaults(func=cmd_bench)
    return parser


def _setup_logging(args) -> None:
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else
                                              logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except (RecipeError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except MissingPrerequisiteError as exc:
        print(f"error: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ContainerError, OSError) as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
