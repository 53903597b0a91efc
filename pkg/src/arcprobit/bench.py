"""Benchmark driver: repeated fits over a grid of sizes and settings.

Writes one flat CSV of per-parameter records that later analysis (error
decay, timing growth) consumes. Every grid cell gets its own deterministic
seed derived from (master seed, setting, target size, replicate), so reruns
reproduce the file exactly and interrupted runs resume by skipping the cells
whose rows are already present.
"""

from __future__ import annotations

import csv
import math
import os
import time
import zlib
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import pandas as pd

from .arc import fit_arc
from .baselines import laplace_fit, oracle_estimate
from .errors import ArcProbitError
from .simulate import PRESET_NAMES, generate, grid_shape, preset

RECORD_COLUMNS = ("setting", "n_target", "n_attained", "seed", "estimator",
                  "param", "estimate", "truth", "stage", "seconds")

ESTIMATOR_NAMES = ("arc", "oracle", "laplace")


@dataclass(frozen=True)
class BenchPlan:
    settings: tuple = PRESET_NAMES
    n_grid: tuple = ()
    n_reps: int = 1
    estimators: tuple = ("arc", "oracle")
    seed0: int = 0
    laplace_max_levels: int = 2000


def default_grid(n_points: int = 13, lo: float = 1e3, hi: float = 1e6) -> tuple:
    """Log-spaced target sizes, deduplicated after rounding."""
    raw = np.logspace(math.log10(lo), math.log10(hi), n_points)
    return tuple(int(v) for v in np.unique(np.rint(raw)).astype(np.int64))


def cell_seed(seed0: int, setting_name: str, n_target: int, rep: int) -> int:
    """Deterministic per-cell seed, independent of plan ordering."""
    try:
        s_idx = PRESET_NAMES.index(setting_name)
    except ValueError:
        s_idx = 1000 + (zlib.crc32(setting_name.encode()) % 1000)
    ss = np.random.SeedSequence((seed0, s_idx, n_target, rep))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def _truth_map(truth) -> dict:
    out = {f"beta{k}": float(v) for k, v in enumerate(truth.beta)}
    out["sigma_a"] = float(truth.sigma_a)
    out["sigma_b"] = float(truth.sigma_b)
    out["sigma2_a"] = float(truth.sigma_a) ** 2
    out["sigma2_b"] = float(truth.sigma_b) ** 2
    return out


def _run_arc(ds, truth):
    t0 = time.perf_counter()
    fit = fit_arc(ds)
    seconds = time.perf_counter() - t0
    params = {f"beta{k}": float(v) for k, v in enumerate(fit.natural.beta)}
    params["sigma2_a"] = fit.natural.sigma2_a
    params["sigma2_b"] = fit.natural.sigma2_b
    params["sigma_a"] = math.sqrt(fit.natural.sigma2_a)
    params["sigma_b"] = math.sqrt(fit.natural.sigma2_b)
    stages = dict(fit.timings)
    return params, seconds, stages


def _run_oracle(ds, truth):
    t0 = time.perf_counter()
    est = oracle_estimate(ds, truth.sigma_a ** 2, truth.sigma_b ** 2)
    seconds = time.perf_counter() - t0
    # the oracle is handed the variances, so only its slopes are estimates
    params = {f"beta{k}": float(v) for k, v in enumerate(est.beta)}
    return params, seconds, {}


def _run_laplace(ds, truth, max_levels):
    t0 = time.perf_counter()
    fit = laplace_fit(ds, max_levels=max_levels)
    seconds = time.perf_counter() - t0
    params = {f"beta{k}": float(v) for k, v in enumerate(fit.beta)}
    params["sigma2_a"] = fit.sigma2_a
    params["sigma2_b"] = fit.sigma2_b
    params["sigma_a"] = math.sqrt(fit.sigma2_a)
    params["sigma_b"] = math.sqrt(fit.sigma2_b)
    return params, seconds, {}


def load_records(path) -> pd.DataFrame:
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        return pd.DataFrame(columns=RECORD_COLUMNS)
    df = pd.read_csv(path)
    missing = set(RECORD_COLUMNS) - set(df.columns)
    if missing:
        raise ValueError(f"records file lacks columns {sorted(missing)}")
    return df


def _done_keys(df: pd.DataFrame) -> set:
    return set(zip(df["setting"], df["n_target"].astype(int),
                   df["seed"].astype(int), df["estimator"]))


def run_plan(plan: BenchPlan, records_path, *, progress=None) -> pd.DataFrame:
    """Execute every missing grid cell, appending rows as each finishes.

    Returns the full records frame (existing plus new rows). `progress` is an
    optional callable receiving one status string per cell.
    """
    for name in plan.estimators:
        if name not in ESTIMATOR_NAMES:
            raise ValueError(f"unknown estimator {name!r}")
    existing = load_records(records_path)
    done = _done_keys(existing)

    new_file = existing.shape[0] == 0 and (
        not os.path.exists(records_path) or os.path.getsize(records_path) == 0)
    fh = open(records_path, "a", newline="")
    writer = csv.writer(fh)
    if new_file:
        writer.writerow(RECORD_COLUMNS)
        fh.flush()

    def emit(base, rows):
        for row in rows:
            writer.writerow(base + row)
        fh.flush()

    try:
        for name in plan.settings:
            setting = preset(name)
            for n_target in plan.n_grid:
                r_n, c_n = grid_shape(setting, n_target)
                for rep in range(plan.n_reps):
                    seed = cell_seed(plan.seed0, name, n_target, rep)
                    todo = [e for e in plan.estimators
                            if (name, n_target, seed, e) not in done]
                    if "laplace" in todo and \
                            r_n + c_n > plan.laplace_max_levels:
                        todo.remove("laplace")
                    if not todo:
                        continue
                    ds, truth = generate(setting, n_target, seed)
                    truths = _truth_map(truth)
                    for est_name in todo:
                        base = [name, n_target, truth.n_attained, seed, est_name]
                        t0 = time.perf_counter()
                        try:
                            if est_name == "arc":
                                params, secs, stages = _run_arc(ds, truth)
                            elif est_name == "oracle":
                                params, secs, stages = _run_oracle(ds, truth)
                            else:
                                params, secs, stages = _run_laplace(
                                    ds, truth, plan.laplace_max_levels)
                        except ArcProbitError as exc:
                            secs = time.perf_counter() - t0
                            emit(base, [["_error", "", "",
                                         type(exc).__name__, f"{secs:.6f}"]])
                            continue
                        rows = [[p, repr(v), repr(truths[p]), "fit",
                                 f"{secs:.6f}"] for p, v in params.items()]
                        rows += [[f"_stage_{st}", "", "", st, f"{sv:.6f}"]
                                 for st, sv in stages.items()]
                        emit(base, rows)
                        if progress is not None:
                            progress(f"{name} n={n_target} rep={rep} "
                                     f"{est_name} {secs:.2f}s")
    finally:
        fh.close()
    return load_records(records_path)


def mse_table(df: pd.DataFrame) -> pd.DataFrame:
    """MSE, bias and spread per (setting, estimator, n_target, param)."""
    est = df[~df["param"].astype(str).str.startswith("_")].copy()
    est["estimate"] = est["estimate"].astype(float)
    est["truth"] = est["truth"].astype(float)
    est["sqerr"] = (est["estimate"] - est["truth"]) ** 2
    est["err"] = est["estimate"] - est["truth"]
    grouped = est.groupby(["setting", "estimator", "n_target", "param"])
    out = grouped.agg(
        mse=("sqerr", "mean"),
        bias=("err", "mean"),
        sd=("err", "std"),
        n_attained=("n_attained", "mean"),
        n_reps=("err", "size"),
    ).reset_index()
    return out


def timing_table(df: pd.DataFrame) -> pd.DataFrame:
    """Median fit seconds per (setting, estimator, n_target).

    Every estimate row repeats its fit's total seconds, so rows are first
    reduced to one per fitted cell.
    """
    est = df[~df["param"].astype(str).str.startswith("_")]
    cells = est.drop_duplicates(
        subset=["setting", "estimator", "n_target", "seed"]).copy()
    cells["seconds"] = cells["seconds"].astype(float)
    out = cells.groupby(["setting", "estimator", "n_target"]).agg(
        seconds=("seconds", "median"),
        n_attained=("n_attained", "median"),
        n_reps=("seconds", "size"),
    ).reset_index()
    return out


def slope_fit(n_values: Iterable, y_values: Iterable):
    """OLS slope of log10(y) on log10(n); returns (slope, stderr).

    Non-positive y values are excluded (a y that hits exactly zero carries no
    information about a decay rate on the log scale).
    """
    n = np.asarray(list(n_values), dtype=float)
    y = np.asarray(list(y_values), dtype=float)
    keep = (n > 0) & (y > 0) & np.isfinite(y)
    n, y = n[keep], y[keep]
    if n.shape[0] < 2:
        raise ValueError("need at least two positive points for a slope")
    lx, ly = np.log10(n), np.log10(y)
    lx_c = lx - lx.mean()
    sxx = float(lx_c @ lx_c)
    if sxx == 0.0:
        raise ValueError("all sizes identical; slope undefined")
    slope = float(lx_c @ ly) / sxx
    resid = ly - (ly.mean() + slope * lx_c)
    dof = max(n.shape[0] - 2, 1)
    stderr = math.sqrt(float(resid @ resid) / dof / sxx)
    return slope, stderr
