"""Command line interface.

Four subcommands: fit a CSV of cells, simulate a benchmark design, run a
benchmark grid, and evaluate a reference estimator on a simulated file.
Everything written to stdout and to output files is deterministic for a
given input and seed; wall-clock chatter goes to stderr. Exit codes: 0 on
success, 2 for data, schema, size or usage problems, 3 when the slopes are
not identified (separation), 4 when an iterative stage fails to converge.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np
import pandas as pd

from . import __version__
from .arc import fit_arc
from .baselines import full_loglik_bruteforce, laplace_fit, oracle_estimate
from .bench import BenchPlan, default_grid, mse_table, run_plan, timing_table
from .data import from_frame, save_csv
from .errors import (
    BootstrapError,
    DensityError,
    NonConvergenceError,
    OptimizationError,
    ParseError,
    QuadratureUnderflowError,
    RankDeficiencyError,
    SchemaError,
    SeparationError,
    SizeGuardError,
)
from .inference import naive_vcov, parametric_bootstrap, pigeonhole_bootstrap, sandwich_vcov
from .numerics import std_normal_cdf
from .simulate import PRESET_NAMES, generate, load_truth, preset, save_truth

_SE_CHOICES = ("naive", "sandwich", "pigeonhole", "parametric", "all")
_TEST_PREFERENCE = ("sandwich", "pigeonhole", "parametric", "naive")


def _load_dataset(args):
    try:
        df = pd.read_csv(args.data, dtype=str)
    except pd.errors.EmptyDataError:
        raise SchemaError("no observations") from None
    if args.features is None:
        reserved = {args.response, args.row, args.col}
        features = [c for c in df.columns if c not in reserved]
    else:
        features = [s for s in args.features.split(",") if s]
    if not features:
        raise SchemaError("no feature columns")
    return from_frame(df, response=args.response, row=args.row, col=args.col,
                      features=features,
                      add_intercept=not args.no_intercept)


def _se_methods(choice: str):
    if choice == "all":
        return ["naive", "sandwich", "pigeonhole"]
    return [choice]


def _two_sided_p(z: float) -> float:
    return 2.0 * std_normal_cdf(-abs(z))


def cmd_fit(args) -> int:
    ds = _load_dataset(args)
    fit = fit_arc(ds)
    print(f"threads: {args.threads}", file=sys.stderr)
    for name, secs in fit.timings.items():
        print(f"stage {name}: {secs:.3f}s", file=sys.stderr)

    methods = _se_methods(args.se)
    s2a, s2b = fit.natural.sigma2_a, fit.natural.sigma2_b
    se_block = {}
    boot_meta = None
    for method in methods:
        if method == "naive":
            vc = naive_vcov(fit.marginal.info, sigma2_a=s2a, sigma2_b=s2b)
        elif method == "sandwich":
            vc = sandwich_vcov(ds, fit.working.gamma, fit.marginal.info,
                               sigma2_a=s2a, sigma2_b=s2b)
        elif method == "pigeonhole":
            vc = pigeonhole_bootstrap(ds, fit, n_replicates=args.bootstrap,
                                      seed=args.seed,
                                      refit_mode=args.bootstrap_mode,
                                      n_jobs=args.threads)
            boot_meta = vc
        else:
            vc = parametric_bootstrap(ds, fit.natural,
                                      n_replicates=args.bootstrap,
                                      seed=args.seed, n_jobs=args.threads)
            boot_meta = vc
        entry = {name: float(se)
                 for name, se in zip(ds.feature_names, vc.se_beta)}
        if vc.se_sigma_a is not None:
            entry["sigma_a"] = float(vc.se_sigma_a)
            entry["sigma_b"] = float(vc.se_sigma_b)
        se_block[method] = entry

    preferred = next((m for m in _TEST_PREFERENCE if m in se_block), None)
    tests = {}
    if preferred is not None:
        for k, name in enumerate(ds.feature_names):
            est = float(fit.natural.beta[k])
            se = se_block[preferred][name]
            z = est / se if se > 0 else math.inf * np.sign(est or 1.0)
            tests[name] = {"estimate": est, "se": se, "z": float(z),
                           "p": float(_two_sided_p(z)), "method": preferred}

    report = {
        "model": "crossed-probit-arc",
        "version": __version__,
        "data": {
            "path": str(args.data),
            "n_cells": int(ds.n_cells),
            "n_rows": int(ds.n_rows),
            "n_cols": int(ds.n_cols),
            "n_features": int(ds.n_features),
            "n_duplicates_dropped": int(ds.n_duplicates_dropped),
        },
        "estimates": {
            "beta": {name: float(v)
                     for name, v in zip(ds.feature_names, fit.natural.beta)},
            "gamma": {name: float(v)
                      for name, v in zip(ds.feature_names, fit.working.gamma)},
            "sigma2_a": float(s2a),
            "sigma2_b": float(s2b),
        },
        "fallback_applied": bool(fit.fallback_applied),
        "messages": list(fit.messages),
        "se": se_block,
        "tests": tests,
        "settings": {
            "seed": int(args.seed),
            "se_methods": methods,
            "bootstrap_replicates": int(args.bootstrap),
        },
    }
    if boot_meta is not None:
        report["bootstrap"] = {
            "n_replicates": int(args.bootstrap),
            "n_used": int(boot_meta.n_replicates_used),
            "n_dropped": int(boot_meta.n_dropped),
            "seed": int(args.seed),
            "mode": args.bootstrap_mode if "pigeonhole" in se_block else "parametric",
        }
    if args.timings:
        report["timings"] = {k: float(v) for k, v in fit.timings.items()}

    _print_fit_table(ds, fit, se_block, tests, preferred)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"report written to {args.out}", file=sys.stderr)
    return 0


def _print_fit_table(ds, fit, se_block, tests, preferred) -> None:
    print(f"n_cells={ds.n_cells} n_rows={ds.n_rows} n_cols={ds.n_cols}")
    header = f"{'parameter':<16}{'estimate':>14}{'se':>14}{'z':>14}{'p':>14}"
    print(header)
    for name in ds.feature_names:
        est = tests.get(name)
        if est is None:
            k = ds.feature_names.index(name)
            print(f"{name:<16}{fit.natural.beta[k]:>14.6g}"
                  f"{'-':>14}{'-':>14}{'-':>14}")
        else:
            print(f"{name:<16}{est['estimate']:>14.6g}{est['se']:>14.6g}"
                  f"{est['z']:>14.6g}{est['p']:>14.6g}")
    for label, value in [("sigma2_a", fit.natural.sigma2_a),
                         ("sigma2_b", fit.natural.sigma2_b)]:
        se = se_block.get(preferred, {}).get(label.replace("2", ""))
        se_text = f"{se:>14.6g}" if se is not None else f"{'-':>14}"
        print(f"{label:<16}{value:>14.6g}{se_text}{'-':>14}{'-':>14}")
    if preferred is not None:
        print(f"standard errors: {preferred}")
    if fit.fallback_applied:
        print("note: variance inversion fell back to zero variances")
    for msg in fit.messages:
        print(f"note: {msg}")


def cmd_simulate(args) -> int:
    setting = preset(args.setting)
    ds, truth = generate(setting, args.n, args.seed)
    save_csv(ds, args.out)
    truth_path = f"{args.out}.truth.json"
    save_truth(truth, truth_path)
    print(f"data={args.out} truth={truth_path} n_attained={truth.n_attained} "
          f"n_rows={truth.n_rows} n_cols={truth.n_cols}")
    return 0


def cmd_bench(args) -> int:
    settings = tuple(s for s in args.settings.split(",") if s)
    if args.sizes:
        sizes = tuple(int(v) for v in args.sizes.split(","))
    else:
        sizes = default_grid()
    estimators = tuple(e for e in args.estimators.split(",") if e)
    plan = BenchPlan(settings=settings, n_grid=sizes, n_reps=args.reps,
                     estimators=estimators, seed0=args.seed0,
                     laplace_max_levels=args.laplace_max_levels)
    df = run_plan(plan, args.out,
                  progress=lambda s: print(s, file=sys.stderr))
    print(f"records={df.shape[0]} file={args.out}")
    if args.summary:
        mse = mse_table(df)
        timing = timing_table(df)
        print(mse.to_csv(index=False), end="")
        print(timing.to_csv(index=False), end="")
    return 0


def cmd_baseline(args) -> int:
    ds = _load_dataset(args)
    if args.method in ("oracle", "bruteforce"):
        truth_path = args.truth or f"{args.data}.truth.json"
        try:
            truth = load_truth(truth_path)
        except FileNotFoundError:
            raise SchemaError(
                f"{args.method} needs the generating values; no truth file "
                f"at {truth_path}") from None
    if args.method == "oracle":
        est = oracle_estimate(ds, truth["sigma2_a"], truth["sigma2_b"])
        out = {"method": "oracle",
               "beta": {name: float(v)
                        for name, v in zip(ds.feature_names, est.beta)},
               "scale": float(est.scale)}
    elif args.method == "bruteforce":
        value = full_loglik_bruteforce(
            ds, np.asarray(truth["beta"], dtype=float),
            math.sqrt(truth["sigma2_a"]), math.sqrt(truth["sigma2_b"]))
        out = {"method": "bruteforce", "loglik": float(value),
               "at": {"beta": truth["beta"], "sigma2_a": truth["sigma2_a"],
                      "sigma2_b": truth["sigma2_b"]}}
    else:
        lap = laplace_fit(ds)
        out = {"method": "laplace",
               "beta": {name: float(v)
                        for name, v in zip(ds.feature_names, lap.beta)},
               "sigma2_a": float(lap.sigma2_a),
               "sigma2_b": float(lap.sigma2_b),
               "loglik": float(lap.loglik),
               "converged": bool(lap.converged)}
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="arcprobit",
        description="Probit regression with two crossed random effects "
                    "in linear time.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_args(p):
        p.add_argument("--data", required=True, help="input CSV (may be .gz)")
        p.add_argument("--response", default="y")
        p.add_argument("--row", default="row")
        p.add_argument("--col", default="col")
        p.add_argument("--features", default=None,
                       help="comma-separated columns; default: all others")
        p.add_argument("--no-intercept", action="store_true")

    p_fit = sub.add_parser("fit", help="fit the model to a CSV of cells")
    add_data_args(p_fit)
    p_fit.add_argument("--se", default="sandwich", choices=_SE_CHOICES)
    p_fit.add_argument("--bootstrap", type=int, default=200,
                       help="bootstrap replicates for resampled se methods")
    p_fit.add_argument("--bootstrap-mode", default="gamma",
                       choices=("gamma", "full"))
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--threads", type=int, default=1)
    p_fit.add_argument("--out", default=None, help="write a JSON report here")
    p_fit.add_argument("--timings", action="store_true",
                       help="include stage timings in the JSON report")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="draw one benchmark dataset")
    p_sim.add_argument("--setting", required=True,
                       help=f"one of {', '.join(PRESET_NAMES)}")
    p_sim.add_argument("--n", type=int, required=True, help="target cells")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True, help="output CSV path")
    p_sim.set_defaults(func=cmd_simulate)

    p_bench = sub.add_parser("bench", help="run an estimator grid")
    p_bench.add_argument("--settings", default=",".join(PRESET_NAMES))
    p_bench.add_argument("--sizes", default=None,
                         help="comma-separated target sizes; default grid "
                              "spans 1e3..1e6")
    p_bench.add_argument("--reps", type=int, default=1)
    p_bench.add_argument("--estimators", default="arc,oracle")
    p_bench.add_argument("--seed0", type=int, default=0)
    p_bench.add_argument("--laplace-max-levels", type=int, default=2000)
    p_bench.add_argument("--out", required=True, help="records CSV path")
    p_bench.add_argument("--summary", action="store_true",
                         help="print error and timing tables afterwards")
    p_bench.set_defaults(func=cmd_bench)

    p_base = sub.add_parser("baseline",
                            help="reference estimators on simulated data")
    add_data_args(p_base)
    p_base.add_argument("--method", required=True,
                        choices=("oracle", "laplace", "bruteforce"))
    p_base.add_argument("--truth", default=None,
                        help="truth sidecar; default <data>.truth.json")
    p_base.add_argument("--out", default=None)
    p_base.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ParseError, DensityError, SizeGuardError,
            RankDeficiencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SeparationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NonConvergenceError, BootstrapError, OptimizationError,
            QuadratureUnderflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
