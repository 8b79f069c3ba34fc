"""Command-line front end: generate data, train, predict, optimise, benchmark.

Exit codes: 0 on success, 1 when a run fails (for example a brute-force
grid that is too large), 2 for usage and configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import aga, baselines, data
from . import objective as ob
from . import sharemodel as sm

log = logging.getLogger("airshare")

METHODS = ("aga-lagrange", "aga-relu", "greedy", "brute")
BENCHMARK_COLUMNS = (
    "problem",
    "method",
    "repetition",
    "route_count",
    "objective",
    "scaled_objective",
    "total_cost",
    "budget",
    "feasible",
    "runtime_ms",
)


class ConfigError(Exception):
    """Bad user input; reported with exit code 2."""


@dataclass
class RunReport:
    method: str
    carrier: str
    route_count: int
    objective: float
    scaled_objective: float
    total_cost: float
    budget: float
    feasible: bool
    runtime_ms: float
    frequencies: dict
    config: dict
    input_hash: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


# ------------------------------------------------------------------ helpers


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None


def _load_panel(path) -> data.MarketPanel:
    if not Path(path).is_dir():
        raise ConfigError(f"panel directory not found: {path}")
    return data.load_panel(path)


def _load_models(path) -> dict[str, sm.ShareModel]:
    path = Path(path)
    if path.is_file():
        return data.load_ground_truth(path)
    if not path.is_dir():
        raise ConfigError(f"model directory not found: {path}")
    models = {}
    for f in sorted(path.glob("*.json")):
        if f.name == "summary.json":
            continue
        m = sm.load_model(f)
        models[m.route] = m
    if not models:
        raise ConfigError(f"no model files in {path}")
    return models


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        config = data.SynthConfig.from_dict(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad generator config: {e}") from None
    market = data.generate_market(config)
    out = _out_dir(args)
    data.save_generated(market, out)
    log.info("wrote %d observations for %d routes to %s", len(market.panel.observations), len(market.panel.routes), out)
    return 0


def _train_config(args) -> sm.TrainConfig:
    return sm.TrainConfig(learning_rate=args.lr, epochs=args.epochs, decay_ratio=args.decay_ratio, decay_every=args.decay_every, seed=args.seed or 0)


def cmd_train(args) -> int:
    panel = _load_panel(args.panel)
    try:
        config = _train_config(args)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    datasets = panel.route_datasets()
    out = _out_dir(args)
    summary: dict = {"arch": args.arch, "features": args.features, "train_config": asdict(config)}

    if args.arch == "auto":
        result = sm.cross_validate(datasets, sm.DEFAULT_GRID, config, args.features, args.threads)
        models = result.models
        summary.update(
            evaluation="leave-one-month-out",
            median_rmse=result.median_rmse,
            median_r2=result.median_r2,
            selected={r: a.label() for r, a in result.selected.items()},
        )
    else:
        arch = sm.Arch.parse((args.arch, args.layers, args.width) if args.arch == "mlp" else args.arch, args.features)
        months = panel.months
        if len(months) < 2:
            raise ConfigError("training needs at least two months (the last one is held out)")
        held = months[-1]
        train_sets = [d.select([i for i, m in enumerate(d.months) if m != held]) for d in datasets]
        val_sets = [d.select([i for i, m in enumerate(d.months) if m == held]) for d in datasets]
        models, _ = sm.fit_routes(train_sets, arch, config)
        rmses, r2s, base = [], [], []
        for v in val_sets:
            pred = sm.predict_route(models[v.route], v)
            rmses.append(sm.rmse(pred, v.y, v.mask))
            r2s.append(sm.r2(pred, v.y, v.mask))
            base.append(sm.uniform_rmse(v))
        finite = [x for x in r2s if np.isfinite(x)]
        summary.update(
            evaluation=f"held-out month {held}",
            median_rmse=float(np.median(rmses)),
            mean_rmse=float(np.mean(rmses)),
            median_r2=float(np.median(finite)) if finite else None,
            median_uniform_rmse=float(np.median(base)),
            route_rmse=dict(zip([v.route for v in val_sets], rmses)),
        )
    for route, model in sorted(models.items()):
        sm.save_model(model, out / f"{route}.json")
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"median RMSE {summary['median_rmse']:.6f}  median R2 {summary['median_r2']}")
    return 0


def cmd_predict(args) -> int:
    panel = _load_panel(args.panel)
    models = _load_models(args.models)
    rows = []
    for d in panel.route_datasets():
        if d.route not in models:
            raise ConfigError(f"no model for route {d.route}")
        pred = sm.predict_route(models[d.route], d)
        for t, month in enumerate(d.months):
            if args.month and month != args.month:
                continue
            for k, carrier in enumerate(d.carriers):
                if d.mask[t, k]:
                    rows.append([month, d.route, carrier, repr(float(d.y[t, k])), repr(float(pred[t, k]))])
    out = _out_dir(args)
    _write_csv(out / "predictions.csv", ["month", "route_id", "carrier_id", "share", "predicted_share"], rows)
    return 0


def cmd_make_problem(args) -> int:
    panel = _load_panel(args.panel)
    models = _load_models(args.models)
    try:
        problem = data.build_problem(panel, models, args.carrier, args.month, args.top, args.budget)
    except (KeyError, ValueError) as e:
        raise ConfigError(str(e)) from None
    out = _out_dir(args)
    ob.save_problem(problem, out / "problem.json")
    return 0


def _method_config(args, method: str):
    if method.startswith("aga"):
        return aga.AgaConfig(
            gamma=args.gamma,
            epsilon=args.epsilon,
            penalty=ob.PenaltyKind.LAGRANGE if method == "aga-lagrange" else ob.PenaltyKind.RELU,
            min_epochs=args.min_epochs,
            max_epochs=args.max_epochs,
            init=args.init,
            seed=args.seed or 0,
            normalize=not args.raw_units,
            box_aware=not args.clip_only,
        )
    if method == "greedy":
        return baselines.GreedyConfig(alpha=int(args.alpha))
    return baselines.BruteForceConfig(alpha=args.alpha, batch_size=args.batch_size)


def run_method(problem: ob.InfluenceProblem, method: str, config, timing: bool = True):
    """Solve ``problem`` with ``method``; returns ``(x, objective, runtime_ms, trace)``."""
    start = time.perf_counter()
    trace = None
    if method.startswith("aga"):
        matrix, trace = aga.optimize(problem, config, timing)
        x = problem.route_vector(matrix)
        value = float(ob.influence(problem, x))
    elif method == "greedy":
        res = baselines.greedy_optimize(problem, config, timing)
        x, value, trace = problem.route_vector(res.matrix), res.objective, res.trace
    else:
        res = baselines.brute_force_optimize(problem, config)
        x, value = problem.route_vector(res.matrix), res.objective
    runtime = (time.perf_counter() - start) * 1e3 if timing else 0.0
    return x, value, runtime, trace


def _report(problem, method, config, x, value, runtime, input_hash) -> RunReport:
    cost = problem.spend(x)
    echo = config.echo() if hasattr(config, "echo") else asdict(config)
    return RunReport(
        method=method,
        carrier=problem.carrier,
        route_count=problem.n_routes,
        objective=value,
        scaled_objective=value / problem.sample_fraction,
        total_cost=cost,
        budget=problem.budget,
        feasible=bool(problem.is_feasible(x)),
        runtime_ms=runtime,
        frequencies={r: float(v) for r, v in zip(problem.routes, x)},
        config={"method": method, **echo},
        input_hash=input_hash,
    )


def _load_problem(path):
    if not Path(path).is_file():
        raise ConfigError(f"problem file not found: {path}")
    try:
        return ob.load_problem(path)
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigError(f"bad problem file {path}: {e}") from None


def cmd_optimize(args) -> int:
    problem, digest = _load_problem(args.problem)
    try:
        config = _method_config(args, args.method)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    timing = not args.deterministic
    x, value, runtime, trace = run_method(problem, args.method, config, timing)
    report = _report(problem, args.method, config, x, value, runtime, digest)
    out = _out_dir(args)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    if trace is not None:
        trace.to_csv(out / "trace.csv", timing)
    print(f"{args.method}: objective {value:.4f} (x{1 / problem.sample_fraction:g} = {report.scaled_objective:.1f}), "
          f"cost {report.total_cost:.4f} / {problem.budget:.4f}")
    return 0


def cmd_benchmark(args) -> int:
    bad = [m for m in args.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {', '.join(bad)}; valid methods: {', '.join(METHODS)}")
    if args.repetitions < 1:
        raise ConfigError("--repetitions must be >= 1")
    timing = not args.deterministic
    rows = []
    for path in args.problems:
        problem, _ = _load_problem(path)
        for method in args.methods:
            try:
                config = _method_config(args, method)
            except ValueError as e:
                raise ConfigError(str(e)) from None
            for rep in range(args.repetitions):
                x, value, runtime, _ = run_method(problem, method, config, timing)
                rows.append(
                    [
                        Path(path).name,
                        method,
                        rep,
                        problem.n_routes,
                        repr(value),
                        repr(value / problem.sample_fraction),
                        repr(problem.spend(x)),
                        repr(problem.budget),
                        bool(problem.is_feasible(x)),
                        repr(runtime),
                    ]
                )
                log.info("%s %s rep %d: %.4f in %.1f ms", Path(path).name, method, rep, value, runtime)
    out = _out_dir(args)
    _write_csv(out / "benchmark.csv", BENCHMARK_COLUMNS, rows)
    return 0


# ------------------------------------------------------------------ parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so a flag
    # given before the subcommand is not overwritten
    def d(value):
        return argparse.SUPPRESS if suppress else value

    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=d(None), help="Seed for every random choice (default: config or 0).")
    p.add_argument("--threads", type=int, default=d(1), help="Worker threads for training.")
    p.add_argument("--out", default=d("."), help="Output directory.")
    p.add_argument("--verbose", "-v", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(True)
    parser = argparse.ArgumentParser(prog="airshare", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate a synthetic market panel.")
    p.add_argument("--config", help="JSON file with generator settings.")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="Train per-route share models.")
    p.add_argument("--panel", required=True)
    p.add_argument("--arch", default="mlp", choices=["multilogit", "mlp", "auto"])
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--features", default="all", choices=sorted(sm.FEATURE_SETS))
    p.add_argument("--lr", type=float, default=sm.TrainConfig.learning_rate)
    p.add_argument("--epochs", type=int, default=sm.TrainConfig.epochs)
    p.add_argument("--decay-ratio", type=float, default=sm.TrainConfig.decay_ratio)
    p.add_argument("--decay-every", type=int, default=sm.TrainConfig.decay_every)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="Predict shares for a panel.")
    p.add_argument("--panel", required=True)
    p.add_argument("--models", required=True, help="Model directory or ground_truth.json.")
    p.add_argument("--month")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("make-problem", parents=[common], help="Build an influence problem file from a panel.")
    p.add_argument("--panel", required=True)
    p.add_argument("--models", required=True, help="Model directory or ground_truth.json.")
    p.add_argument("--carrier", required=True)
    p.add_argument("--month")
    p.add_argument("--top", type=int)
    p.add_argument("--budget", type=float)
    p.set_defaults(func=cmd_make_problem)

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--gamma", type=float, default=aga.AgaConfig.gamma)
    solver.add_argument("--epsilon", type=float, default=aga.AgaConfig.epsilon)
    solver.add_argument("--min-epochs", type=int, default=aga.AgaConfig.min_epochs)
    solver.add_argument("--max-epochs", type=int, default=aga.AgaConfig.max_epochs)
    solver.add_argument("--init", default="zero", choices=[i.value for i in aga.Init])
    solver.add_argument("--alpha", type=float, default=1)
    solver.add_argument("--batch-size", type=int, default=baselines.BruteForceConfig.batch_size)
    solver.add_argument("--raw-units", action="store_true", help="Ascend in flights and passengers instead of unit-free coordinates.")
    solver.add_argument("--clip-only", action="store_true", help="Choose beta from all coordinates, ignoring the frequency box.")
    solver.add_argument("--deterministic", action="store_true", help="Write zero timings so reruns are byte-identical.")

    p = sub.add_parser("optimize", parents=[common, solver], help="Optimise one problem.")
    p.add_argument("--problem", required=True)
    p.add_argument("--method", required=True, choices=METHODS)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("benchmark", parents=[common, solver], help="Compare methods over problems.")
    p.add_argument("--problems", nargs="+", required=True)
    p.add_argument("--methods", nargs="+", default=["aga-relu", "greedy"])
    p.add_argument("--repetitions", type=int, default=1)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, data.SchemaError, data.SimplexError, data.EmptyMarketError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (baselines.GridTooLargeError, aga.NoFeasibleIterateError, aga.DegenerateProblemError, sm.TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
