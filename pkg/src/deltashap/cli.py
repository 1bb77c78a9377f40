"""Command-line front end.

Commands: value, evaluate, profile, removal, synth. Failures print one line
``error code=<CODE> exit=<status> message=<text>`` on stderr and exit with
2 (config), 3 (data) or 4 (runtime).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, build_config
from .errors import AlignmentError, ConfigError, DeltaShapError
from .estimators import (
    AccuracyTarget,
    ValuationResult,
    delta_shapley,
    exact_shapley,
    monte_carlo_shapley,
    stratified_shapley,
)
from .evaluation import DIRECTIONS, compare_methods, removal_curve, result_label, stability_profile
from .games import AdditiveGame
from .io import fmt, manifest, read_result, read_values, write_csv, write_dict_rows, write_json, write_values
from .models import STRONGLY_CONVEX, ModelGame

# flags that map one-to-one onto RunConfig fields
OVERRIDES = [
    ("--csv", "csv", str, "input CSV (numeric features, label column, optional split column)"),
    ("--label-column", "label_column", str, "label column name"),
    ("--eval-fraction", "eval_fraction", float, "evaluation share when the CSV has no split column"),
    ("--synth", "synth", str, "synthetic generator when no CSV is given"),
    ("--n-train", "n_train", int, "synthetic training points"),
    ("--n-eval", "n_eval", int, "synthetic evaluation points"),
    ("--dim", "dim", int, "synthetic feature dimension"),
    ("--separation", "separation", float, "synthetic class separation"),
    ("--regime", "regime", str, "strongly-convex | convex-sgd | nonconvex-sgd"),
    ("--lam", "lam", float, "L2 regularization strength"),
    ("--method", "method", str, "exact | mc | stratified | delta"),
    ("--preset", "preset", str, "delta band preset: mid | low"),
    ("--band", "band", str, "explicit coalition-size band LOWER,UPPER"),
    ("--mode", "mode", str, "fixed-subsequence | expected-utility"),
    ("--h", "h", int, "permutations per expected-utility marginal"),
    ("--budget", "budget", str, "iterations, 'convergence' or 'exhaustive'"),
    ("--max-iter", "max_iter", int, "iteration cap under convergence budgets"),
    ("--mk-cap", "mk_cap", int, "cap on per-layer sample sizes"),
    ("-a", "a", float, "accuracy target a"),
    ("-b", "b", float, "failure probability b"),
]


def _add_common(p: argparse.ArgumentParser, run_flags: bool = True) -> None:
    p.add_argument("--config", help="INI file with [data] [model] [estimator] [run] sections")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--out", help="output directory")
    if run_flags:
        for flag, dest, typ, text in OVERRIDES:
            p.add_argument(flag, dest=dest, type=typ, default=None, help=text)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deltashap", description="Layer-stratified data valuation.")
    parser.add_argument("--version", action="version", version=f"deltashap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("value", help="estimate data values")
    _add_common(p)

    p = sub.add_parser("evaluate", help="compare result files against a reference")
    _add_common(p, run_flags=False)
    p.add_argument("results", nargs="+", help="result.json files")
    p.add_argument("--reference", required=True, help="reference result.json")

    p = sub.add_parser("profile", help="marginal-contribution statistics per coalition size")
    _add_common(p)
    p.add_argument("--layers", required=True, help="comma-separated coalition sizes, e.g. 5,10,20")
    p.add_argument("--samples", type=int, default=200, help="samples per layer (>= 10)")
    p.add_argument("--additive-double", action="store_true",
                   help="profile a seeded additive game instead of trained models")

    p = sub.add_parser("removal", help="accuracy after removing points by value")
    _add_common(p)
    p.add_argument("--values", required=True, help="values.csv or result.json")
    p.add_argument("--directions", default=",".join(DIRECTIONS), help="comma-separated removal orders")
    p.add_argument("--step", type=float, default=0.1, help="fraction removed per step")

    p = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    _add_common(p)
    return parser


def _config(args) -> RunConfig:
    overrides = {dest: getattr(args, dest) for _, dest, _, _ in OVERRIDES}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    overrides.update(seed=args.seed, workers=args.workers, out=args.out)
    return build_config(args.config, overrides)


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# value
# ---------------------------------------------------------------------------


def run_value(cfg: RunConfig) -> tuple[ValuationResult, dict]:
    data = cfg.load_data()
    train_cfg = cfg.train_config(data)
    seeds = cfg.seeds()
    game = ModelGame(data, train_cfg, seeds.child("game"))
    est_seeds = seeds.child("estimator", 0)
    workers = cfg.worker_count()
    budget = cfg.budget_value()
    extra: dict = {}
    if cfg.method == "exact":
        started = time.perf_counter()
        values = exact_shapley(game)
        v_full, v_empty = game.value(range(data.n_train)), game.value(())
        result = ValuationResult("exact", list(range(data.n_train)), values, cfg.seed,
                                 trainings_performed=2 ** data.n_train, wall_time=time.perf_counter() - started,
                                 iterations=1, converged=True, meta={"v_full": v_full, "v_empty": v_empty})
    elif cfg.method == "mc":
        result = monte_carlo_shapley(game, seeds=est_seeds, budget="convergence" if budget == "exhaustive" else budget,
                                     max_iter=cfg.max_iter, tolerance=cfg.tolerance, workers=workers)
    elif cfg.method == "stratified":
        sizes = "exhaustive" if budget == "exhaustive" else None
        result = stratified_shapley(game, target=AccuracyTarget(cfg.a, cfg.b), seeds=est_seeds,
                                    sample_sizes=sizes, mk_cap=cfg.mk_cap, mode=cfg.mode, h=cfg.h,
                                    h_cap=cfg.h_cap, workers=workers)
    else:
        spec = cfg.semivalue(data.n_train)
        extra["band"] = list(spec.band)
        result = delta_shapley(game, spec=spec, seeds=est_seeds, budget=budget, max_iter=cfg.max_iter,
                               tolerance=cfg.tolerance, mode=cfg.mode, h=cfg.h or 1, workers=workers)
    digest = data.content_hash()
    result.meta.update(dataset_hash=digest, label=result_label(result))
    info = {"dataset": data.summary(), "train_config": train_cfg.to_dict(), **extra}
    return result, info


def cmd_value(args) -> int:
    cfg = _config(args)
    result, info = run_value(cfg)
    out = _outdir(cfg.out)
    digest = result.meta["dataset_hash"]
    write_values(out / "values.csv", result, digest)
    write_json(out / "result.json", result.to_dict())
    write_json(out / "manifest.json", manifest("value", cfg.to_dict(), cfg.seed, digest, **info))
    print(f"wrote {len(result.points)} values to {out / 'values.csv'} "
          f"({result.trainings_performed} trainings, {result.iterations} iterations)")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    reference = read_result(args.reference)
    results = [read_result(p) for p in args.results]
    ref_hash = reference.meta.get("dataset_hash")
    for path, res in zip(args.results, results):
        if res.meta.get("dataset_hash") != ref_hash:
            raise AlignmentError(f"{path} was computed on a different dataset than {args.reference}")
    report = compare_methods(results, reference)
    out = _outdir(args.out or "out")
    rows = report["rows"]
    write_dict_rows(out / "comparison.csv", rows, {"seed": reference.seed, "dataset_hash": ref_hash})
    write_json(out / "comparison.json", {**report, "seed": reference.seed, "dataset_hash": ref_hash})
    for row in rows:
        print(f"{row['method']}: rho={fmt(round(row['rho'], 4))} trainings={row['trainings_performed']} "
              f"speedup={fmt(round(row['training_speedup'], 3))}")
    return 0


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------


def parse_layers(text: str) -> list[int]:
    try:
        layers = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--layers expects comma-separated integers, got {text!r}") from None
    if not layers:
        raise ConfigError("--layers is empty")
    return layers


def cmd_profile(args) -> int:
    cfg = _config(args)
    layers = parse_layers(args.layers)
    if args.samples < 10:
        raise ConfigError("--samples must be >= 10")
    seeds = cfg.seeds()
    if args.additive_double:
        # equal weights: every marginal is the same constant
        game, digest, info = AdditiveGame(np.full(cfg.n_train, 1.0 / cfg.n_train)), None, {"game": "additive-double"}
    else:
        data = cfg.load_data()
        train_cfg = cfg.train_config(data)
        game = ModelGame(data, train_cfg, seeds.child("game"))
        digest = data.content_hash()
        info = {"dataset": data.summary(), "train_config": train_cfg.to_dict()}
    for k in layers:
        if not 0 <= k <= game.n - 1:
            raise ConfigError(f"layer size {k} outside [0, {game.n - 1}]")
    profile = stability_profile(game, layers, args.samples, seeds.child("profile"), workers=cfg.worker_count())
    out = _outdir(cfg.out)
    rows = profile.to_rows()
    write_dict_rows(out / "profile.csv", rows, {"seed": cfg.seed, "dataset_hash": digest or ""})
    write_json(out / "profile.json", {"rows": rows, "seed": cfg.seed, "dataset_hash": digest})
    write_json(out / "manifest.json", manifest("profile", cfg.to_dict(), cfg.seed, digest, layers=layers,
                                               samples=args.samples, **info))
    medians = profile.column("median_abs")
    if not args.additive_double and cfg.regime == STRONGLY_CONVEX:
        ordered = sorted(zip(layers, medians))
        if any(b[1] > a[1] for a, b in zip(ordered, ordered[1:])):
            print("warning: median |v_i(S)| is not non-increasing across the listed sizes", file=sys.stderr)
    print(f"wrote {len(rows)} profile rows to {out / 'profile.csv'}")
    return 0


# ---------------------------------------------------------------------------
# removal
# ---------------------------------------------------------------------------


def cmd_removal(args) -> int:
    cfg = _config(args)
    directions = [d.strip() for d in args.directions.split(",") if d.strip()]
    for d in directions:
        if d not in DIRECTIONS:
            raise ConfigError(f"unknown direction {d!r}; expected one of {DIRECTIONS}")
    points, values, info = read_values(args.values)
    data = cfg.load_data()
    digest = data.content_hash()
    if info.get("dataset_hash") and info["dataset_hash"] != digest:
        raise AlignmentError(f"{args.values} was computed on a different dataset")
    if sorted(points) != list(range(data.n_train)):
        raise AlignmentError(f"{args.values} must hold one value per training point (0..{data.n_train - 1})")
    aligned = np.empty(data.n_train)
    aligned[points] = values
    train_cfg = cfg.train_config(data)
    seeds = cfg.seeds().child("removal")
    out = _outdir(cfg.out)
    summary = {}
    for d in directions:
        curve = removal_curve(aligned, data, train_cfg, d, args.step, seeds)
        write_dict_rows(out / f"curve_{d}.csv", curve.to_rows(), {"seed": cfg.seed, "dataset_hash": digest})
        summary[d] = {"fractions_removed": curve.fractions_removed, "accuracies": curve.accuracies,
                      "losses": curve.losses, "truncated": curve.truncated}
        print(f"{d}: {len(curve.accuracies)} points" + (" (truncated)" if curve.truncated else ""))
    write_json(out / "removal.json", {"curves": summary, "seed": cfg.seed, "dataset_hash": digest})
    write_json(out / "manifest.json", manifest("removal", cfg.to_dict(), cfg.seed, digest,
                                               values=str(args.values), step=args.step, directions=directions))
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _config(args)
    if cfg.csv is not None:
        raise ConfigError("synth writes a synthetic dataset; drop the csv setting")
    data = cfg.load_data()
    out = _outdir(cfg.out)
    header = [f"x{j}" for j in range(data.dim)] + ["label", "split"]

    def rows():
        for X, y, split in ((data.features, data.labels, "train"), (data.eval_features, data.eval_labels, "eval")):
            for x, label in zip(X, y):
                yield [*map(float, x), int(label), split]

    write_csv(out / "synth.csv", header, rows())
    digest = data.content_hash()
    write_json(out / "manifest.json", manifest("synth", cfg.to_dict(), cfg.seed, digest, dataset=data.summary()))
    print(f"wrote {data.n_train + data.n_eval} rows to {out / 'synth.csv'}")
    return 0


COMMANDS = {"value": cmd_value, "evaluate": cmd_evaluate, "profile": cmd_profile,
            "removal": cmd_removal, "synth": cmd_synth}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DeltaShapError as exc:
        print(f"error code={exc.code} exit={exc.exit_status} message={exc}", file=sys.stderr)
        return exc.exit_status
    except (OSError, MemoryError) as exc:
        print(f"error code=RUNTIME_ERROR exit=4 message={exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
