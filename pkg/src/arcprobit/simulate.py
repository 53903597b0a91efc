"""Synthetic crossed designs for benchmarking the estimators.

Eight presets crossing three switches:

  layout   bal (R = C = round(N^0.56)) or imb (R = round(N^0.88) rows,
           C = round(N^0.53) columns, so rows are much thinner than columns)
  effect   nul (all slopes zero) or lin (slopes -0.9 to 0.9 in steps of 0.3)
  scale    hi (sigma_a = sigma_b = 1.0) or lo (sigma_a = 0.5, sigma_b = 0.2)

always with intercept -1.2 and seven covariates drawn iid across cells from
a zero-mean Gaussian with AR(1) covariance 0.5^|k-l|. Cells enter the R x C
grid independently with probability n_target / (R C), and the response comes
from the latent threshold model with row, column and iid Gaussian noise.

Generation is reproducible byte for byte: counter-based Philox streams are
keyed by (seed, purpose, block), and cells are materialized in row-major
blocks of a fixed, size-derived shape, so neither thread count nor chunking
can reorder the draws.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, toeplitz

from .data import from_cells
from .errors import DensityError
from .numerics import std_normal_cdf

_LAYOUTS = {"bal": (0.56, 0.56), "imb": (0.88, 0.53)}
_SCALES = {"hi": (1.0, 1.0), "lo": (0.5, 0.2)}
_P = 7
_INTERCEPT = -1.2
_AR1 = 0.5

# cells are drawn in row blocks of about this many grid entries
_BLOCK_CELLS = 4_000_000

PRESET_NAMES = tuple(
    f"{lay}-{eff}-{sc}" for lay in ("bal", "imb") for eff in ("nul", "lin")
    for sc in ("hi", "lo")
)


@dataclass(frozen=True)
class SimSetting:
    name: str
    rho: float
    kappa: float
    sigma_a: float
    sigma_b: float
    beta: np.ndarray          # (p + 1,), intercept first
    p: int = _P
    ar1: float = _AR1


def preset(name: str) -> SimSetting:
    """Parse a preset name like "imb-nul-hi" into its setting."""
    parts = name.lower().split("-")
    if len(parts) != 3 or parts[0] not in _LAYOUTS or \
            parts[1] not in ("nul", "lin") or parts[2] not in _SCALES:
        raise ValueError(
            f"unknown setting {name!r}; expected layout-effect-scale from "
            f"{{bal,imb}}-{{nul,lin}}-{{hi,lo}}")
    rho, kappa = _LAYOUTS[parts[0]]
    sigma_a, sigma_b = _SCALES[parts[2]]
    if parts[1] == "nul":
        slopes = np.zeros(_P)
    else:
        slopes = _INTERCEPT + 0.3 * np.arange(1, _P + 1)
    return SimSetting(
        name="-".join(parts), rho=rho, kappa=kappa,
        sigma_a=sigma_a, sigma_b=sigma_b,
        beta=np.concatenate(([_INTERCEPT], slopes)),
    )


def covariate_covariance(setting: SimSetting) -> np.ndarray:
    return toeplitz(setting.ar1 ** np.arange(setting.p))


def expected_positive_rate(setting: SimSetting) -> float:
    """Marginal P(y = 1) under the latent model."""
    slopes = setting.beta[1:]
    var = (1.0 + setting.sigma_a**2 + setting.sigma_b**2
           + float(slopes @ covariate_covariance(setting) @ slopes))
    return std_normal_cdf(setting.beta[0] / math.sqrt(var))


def grid_shape(setting: SimSetting, n_target: int):
    """R and C for a target size; round-half-even like the rest of numpy."""
    r = int(np.rint(float(n_target) ** setting.rho))
    c = int(np.rint(float(n_target) ** setting.kappa))
    return max(r, 1), max(c, 1)


@dataclass
class TruthRecord:
    setting: str
    beta: np.ndarray
    sigma_a: float
    sigma_b: float
    seed: int
    n_target: int
    n_attained: int
    n_rows: int
    n_cols: int
    rounding: str = "round-half-even"
    row_effects: Optional[np.ndarray] = None
    col_effects: Optional[np.ndarray] = None

    def to_json_dict(self) -> dict:
        return {
            "setting": self.setting,
            "beta": [float(v) for v in self.beta],
            "sigma_a": float(self.sigma_a),
            "sigma_b": float(self.sigma_b),
            "sigma2_a": float(self.sigma_a) ** 2,
            "sigma2_b": float(self.sigma_b) ** 2,
            "seed": int(self.seed),
            "n_target": int(self.n_target),
            "n_attained": int(self.n_attained),
            "n_rows": int(self.n_rows),
            "n_cols": int(self.n_cols),
            "rounding": self.rounding,
        }


def save_truth(truth: TruthRecord, path) -> None:
    with open(path, "w") as fh:
        json.dump(truth.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_truth(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _stream(seed: int, *tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *tag))))


def generate(setting: SimSetting, n_target: int, seed: int):
    """Draw one dataset; returns (dataset, truth record).

    The attained size is Binomial(R*C, n_target/(R*C)) and lands within a few
    standard deviations of the target.
    """
    if n_target < 2:
        raise ValueError("n_target must be at least 2")
    r_n, c_n = grid_shape(setting, n_target)
    pi = n_target / (r_n * c_n)
    if pi > 1.0:
        raise DensityError(
            f"target {n_target} exceeds the {r_n} x {c_n} grid capacity")

    a = setting.sigma_a * _stream(seed, 0).standard_normal(r_n)
    b = setting.sigma_b * _stream(seed, 1).standard_normal(c_n)
    chol_l = cholesky(covariate_covariance(setting), lower=True)

    rows_per_block = max(1, math.ceil(_BLOCK_CELLS / c_n))
    rows_parts, cols_parts, x_parts, y_parts = [], [], [], []
    for block, lo in enumerate(range(0, r_n, rows_per_block)):
        nb = min(rows_per_block, r_n - lo)
        rng = _stream(seed, 2, block)
        mask = rng.random((nb, c_n)) < pi
        li, lj = np.nonzero(mask)
        m = li.shape[0]
        if m == 0:
            continue
        z = rng.standard_normal((m, setting.p))
        x = z @ chol_l.T
        eps = rng.standard_normal(m)
        ri = li + lo
        latent = (setting.beta[0] + x @ setting.beta[1:]
                  + a[ri] + b[lj] + eps)
        rows_parts.append(ri)
        cols_parts.append(lj)
        x_parts.append(x)
        y_parts.append((latent > 0.0).astype(float))

    if not rows_parts:
        raise DensityError("no cells were sampled; target size too small")
    rows = np.concatenate(rows_parts)
    cols = np.concatenate(cols_parts)
    x_all = np.vstack(x_parts)
    y_all = np.concatenate(y_parts)
    x_all = np.column_stack([np.ones(y_all.shape[0]), x_all])

    ds = from_cells(
        x_all, y_all, rows=rows, cols=cols, n_rows=r_n, n_cols=c_n,
        feature_names=["(intercept)"] + [f"x{k}" for k in range(1, setting.p + 1)],
        has_intercept=True,
    )
    truth = TruthRecord(
        setting=setting.name, beta=setting.beta.copy(),
        sigma_a=setting.sigma_a, sigma_b=setting.sigma_b, seed=seed,
        n_target=n_target, n_attained=ds.n_cells,
        n_rows=r_n, n_cols=c_n, row_effects=a, col_effects=b,
    )
    return ds, truth
