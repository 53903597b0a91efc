"""Uncertainty for the composite fit.

Sandwich route: the marginal probit score is summed within rows, within
columns and per cell; the two-way cluster-robust meat is
V = V_rows + V_cols - V_cells, which the observed information breads on both
sides. The gamma-scale covariance transfers to the natural scale by the
plug-in factor (1 + sigma2_a + sigma2_b).

Bootstrap routes: the pigeonhole scheme resamples row and column multinomial
weights independently and refits with product weights per cell; the
parametric scheme simulates new responses on the observed design at the
fitted parameters and reruns the full three-stage fit, which also yields
spread for the variance components.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from joblib import Parallel, delayed
from scipy import linalg as sla

from .arc import ArcFit, NaturalParams, fit_arc
from .data import SparseBinaryDataset
from .errors import ArcProbitError, BootstrapError, RankDeficiencyError
from .probit import fit_marginal_probit, score_obs

MAX_DROP_SHARE = 0.2


@dataclass
class ScoreBlocks:
    u_cells: np.ndarray   # (N, p)
    u_rows: np.ndarray    # (R, p) row-summed scores
    u_cols: np.ndarray    # (C, p)


def score_blocks(dataset: SparseBinaryDataset, gamma) -> ScoreBlocks:
    """Per-cell scores and their row/column group sums at gamma."""
    u = score_obs(gamma, dataset.x, dataset.y)
    p = u.shape[1]
    u_rows = np.empty((dataset.n_rows, p))
    u_cols = np.empty((dataset.n_cols, p))
    for k in range(p):
        u_rows[:, k] = np.bincount(dataset.rows, weights=u[:, k],
                                   minlength=dataset.n_rows)
        u_cols[:, k] = np.bincount(dataset.cols, weights=u[:, k],
                                   minlength=dataset.n_cols)
    return ScoreBlocks(u_cells=u, u_rows=u_rows, u_cols=u_cols)


@dataclass
class VcovResult:
    method: str
    vcov_gamma: Optional[np.ndarray]
    vcov_beta: np.ndarray
    se_gamma: Optional[np.ndarray]
    se_beta: np.ndarray
    n_clipped_eigenvalues: int = 0
    n_replicates_used: Optional[int] = None
    n_dropped: int = 0
    se_sigma_a: Optional[float] = None
    se_sigma_b: Optional[float] = None


def _psd_project(v: np.ndarray):
    """Clip negative eigenvalues to zero; returns (projected, n_clipped)."""
    vals, vecs = np.linalg.eigh(0.5 * (v + v.T))
    neg = vals < 0.0
    if not neg.any():
        return v, 0
    vals = np.maximum(vals, 0.0)
    return (vecs * vals) @ vecs.T, int(np.sum(neg))


def _se(vcov):
    return np.sqrt(np.maximum(np.diag(vcov), 0.0))


def naive_vcov(info, *, sigma2_a: float = 0.0, sigma2_b: float = 0.0) -> VcovResult:
    """Inverse observed information, ignoring the crossed dependence."""
    try:
        c, low = sla.cho_factor(info)
    except (sla.LinAlgError, ValueError):
        raise RankDeficiencyError("observed information is singular") from None
    vcov_gamma = sla.cho_solve((c, low), np.eye(info.shape[0]))
    vcov_gamma = 0.5 * (vcov_gamma + vcov_gamma.T)
    vcov_beta = vcov_beta_plugin(vcov_gamma, sigma2_a, sigma2_b)
    return VcovResult(method="naive", vcov_gamma=vcov_gamma,
                      vcov_beta=vcov_beta, se_gamma=_se(vcov_gamma),
                      se_beta=_se(vcov_beta))


def vcov_beta_plugin(vcov_gamma: np.ndarray, sigma2_a: float,
                     sigma2_b: float) -> np.ndarray:
    """Gamma-scale covariance carried to the natural scale."""
    return (1.0 + sigma2_a + sigma2_b) * np.asarray(vcov_gamma, dtype=float)


def sandwich_vcov(dataset: SparseBinaryDataset, gamma, info, *,
                  sigma2_a: float = 0.0, sigma2_b: float = 0.0) -> VcovResult:
    """Two-way cluster-robust covariance of gamma (and of beta by plug-in)."""
    blocks = score_blocks(dataset, gamma)
    v_rows = np.einsum("rp,rq->pq", blocks.u_rows, blocks.u_rows)
    v_cols = np.einsum("cp,cq->pq", blocks.u_cols, blocks.u_cols)
    v_cells = np.einsum("np,nq->pq", blocks.u_cells, blocks.u_cells)
    meat = v_rows + v_cols - v_cells
    meat, n_clipped = _psd_project(meat)
    if n_clipped:
        warnings.warn(f"two-way meat matrix had {n_clipped} negative "
                      "eigenvalue(s); clipped to zero")
    try:
        c, low = sla.cho_factor(info)
    except (sla.LinAlgError, ValueError):
        raise RankDeficiencyError("observed information is singular") from None
    bread = sla.cho_solve((c, low), np.eye(info.shape[0]))
    vcov_gamma = bread @ meat @ bread
    vcov_gamma = 0.5 * (vcov_gamma + vcov_gamma.T)
    vcov_beta = vcov_beta_plugin(vcov_gamma, sigma2_a, sigma2_b)
    return VcovResult(method="sandwich", vcov_gamma=vcov_gamma,
                      vcov_beta=vcov_beta, se_gamma=_se(vcov_gamma),
                      se_beta=_se(vcov_beta), n_clipped_eigenvalues=n_clipped)


def _replicate_cov(samples: list, point_dim: int):
    arr = np.asarray(samples, dtype=float)
    if arr.shape[0] < 2:
        raise BootstrapError("fewer than two usable bootstrap replicates")
    # covariance is shift-invariant; centering on the first replicate keeps
    # near-identical replicates from picking up mean-subtraction rounding
    arr = arr - arr[0]
    return np.cov(arr, rowvar=False, ddof=1).reshape(point_dim, point_dim)


def pigeonhole_bootstrap(dataset: SparseBinaryDataset, fit: ArcFit,
                         n_replicates: int = 200, seed: int = 0,
                         refit_mode: str = "gamma", n_jobs: int = 1,
                         unit_weights: bool = False) -> VcovResult:
    """Row/column multinomial resampling with product cell weights.

    refit_mode "gamma" refits only the marginal probit per replicate (warm
    started at the point estimate) and rescales to the beta scale with the
    point-estimate variance factor; "full" reruns the whole three-stage fit.
    unit_weights is a debugging hook that forces every weight to one, making
    each replicate reproduce the point estimate exactly.
    """
    if refit_mode not in ("gamma", "full"):
        raise ValueError(f"unknown refit_mode {refit_mode!r}")
    r_n, c_n = dataset.n_rows, dataset.n_cols
    p_row = np.full(r_n, 1.0 / r_n)
    p_col = np.full(c_n, 1.0 / c_n)
    scale = math.sqrt(1.0 + fit.natural.sigma2_a + fit.natural.sigma2_b)

    def one(r):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
        m = rng.multinomial(r_n, p_row)
        n = rng.multinomial(c_n, p_col)
        w = (m[dataset.rows] * n[dataset.cols]).astype(float)
        if unit_weights:
            w = np.ones(dataset.n_cells)
        try:
            if refit_mode == "gamma":
                mf = fit_marginal_probit(dataset, weights=w,
                                         gamma0=fit.working.gamma)
                return mf.gamma, scale * mf.gamma, None, None
            af = fit_arc(dataset, weights=w)
            return (af.working.gamma, af.natural.beta,
                    af.natural.sigma2_a, af.natural.sigma2_b)
        except ArcProbitError:
            return None

    results = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(one)(r) for r in range(n_replicates))
    kept = [r for r in results if r is not None]
    n_dropped = n_replicates - len(kept)
    if n_dropped > MAX_DROP_SHARE * n_replicates:
        raise BootstrapError(
            f"{n_dropped} of {n_replicates} bootstrap replicates failed to refit")

    p = dataset.n_features
    vcov_gamma = _replicate_cov([r[0] for r in kept], p)
    vcov_beta = _replicate_cov([r[1] for r in kept], p)
    se_sa = se_sb = None
    if refit_mode == "full":
        se_sa = float(np.std([math.sqrt(r[2]) for r in kept], ddof=1))
        se_sb = float(np.std([math.sqrt(r[3]) for r in kept], ddof=1))
    return VcovResult(method="pigeonhole", vcov_gamma=vcov_gamma,
                      vcov_beta=vcov_beta, se_gamma=_se(vcov_gamma),
                      se_beta=_se(vcov_beta), n_replicates_used=len(kept),
                      n_dropped=n_dropped, se_sigma_a=se_sa, se_sigma_b=se_sb)


def parametric_bootstrap(dataset: SparseBinaryDataset, natural: NaturalParams,
                         n_replicates: int = 200, seed: int = 0,
                         n_jobs: int = 1) -> VcovResult:
    """Simulate responses at the fitted parameters on the observed design,
    refit the full three stages, and read spread off the replicates. This is
    the route that prices uncertainty for sigma2_a and sigma2_b."""
    beta = np.asarray(natural.beta, dtype=float)
    sa = math.sqrt(max(natural.sigma2_a, 0.0))
    sb = math.sqrt(max(natural.sigma2_b, 0.0))
    xb = dataset.x @ beta

    def one(r):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r, 1)))
        a = sa * rng.standard_normal(dataset.n_rows)
        b = sb * rng.standard_normal(dataset.n_cols)
        eps = rng.standard_normal(dataset.n_cells)
        y_star = (xb + a[dataset.rows] + b[dataset.cols] + eps > 0.0).astype(float)
        try:
            af = fit_arc(dataset.with_response(y_star))
            return (af.working.gamma, af.natural.beta,
                    af.natural.sigma2_a, af.natural.sigma2_b)
        except ArcProbitError:
            return None

    results = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(one)(r) for r in range(n_replicates))
    kept = [r for r in results if r is not None]
    n_dropped = n_replicates - len(kept)
    if n_dropped > MAX_DROP_SHARE * n_replicates:
        raise BootstrapError(
            f"{n_dropped} of {n_replicates} parametric replicates failed to refit")

    p = dataset.n_features
    vcov_gamma = _replicate_cov([r[0] for r in kept], p)
    vcov_beta = _replicate_cov([r[1] for r in kept], p)
    se_sa = float(np.std([math.sqrt(r[2]) for r in kept], ddof=1))
    se_sb = float(np.std([math.sqrt(r[3]) for r in kept], ddof=1))
    return VcovResult(method="parametric", vcov_gamma=vcov_gamma,
                      vcov_beta=vcov_beta, se_gamma=_se(vcov_gamma),
                      se_beta=_se(vcov_beta), n_replicates_used=len(kept),
                      n_dropped=n_dropped, se_sigma_a=se_sa, se_sigma_b=se_sb)
