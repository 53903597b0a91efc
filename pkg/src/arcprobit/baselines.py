"""Reference estimators for small problems.

Three independent routes against which the fast composite fit is judged:

  oracle_estimate         marginal probit rescaled with the TRUE variance
                          total, the best any marginal-first method could do
  full_loglik_bruteforce  the exact marginal log-likelihood by tensor-product
                          quadrature over every random effect, feasible only
                          for a handful of rows and columns
  laplace_fit             maximum of the joint-mode Laplace approximation,
                          the standard slow-but-general competitor

The brute force and Laplace routes deliberately share no integration code
with the production path, so agreement between them is evidence, not an
artifact of common plumbing.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import log_ndtr, logsumexp

from .data import SparseBinaryDataset
from .errors import OptimizationError, SizeGuardError
from .probit import _pieces, fit_marginal_probit
from .quadrature import gauss_hermite

_LOG_SQRT_PI = 0.5 * math.log(math.pi)
_LOG_2PI = math.log(2.0 * math.pi)

BRUTEFORCE_MAX_LEVELS = 4
LAPLACE_MAX_LEVELS = 2000
INNER_GRAD_TOL = 1e-8
INNER_MAX_ITER = 100


@dataclass(frozen=True)
class OracleEstimate:
    beta: np.ndarray
    gamma: np.ndarray
    scale: float


def oracle_estimate(dataset: SparseBinaryDataset, sigma2_a: float,
                    sigma2_b: float) -> OracleEstimate:
    """Marginal probit rescaled by the true attenuation factor.

    Knows the variance components it is handed, so it prices only the
    regression coefficients; it is the natural yardstick for how much the
    variance stages cost the composite estimator.
    """
    if sigma2_a < 0 or sigma2_b < 0:
        raise ValueError("variance components must be non-negative")
    marginal = fit_marginal_probit(dataset)
    scale = math.sqrt(1.0 + sigma2_a + sigma2_b)
    return OracleEstimate(beta=marginal.gamma * scale,
                          gamma=marginal.gamma.copy(), scale=scale)


def _scaled_rule(sigma: float, n_nodes: int):
    """Nodes/log-weights for integrating against a N(0, sigma^2) density.

    sigma = 0 collapses to the single point mass at zero.
    """
    if sigma == 0.0:
        return np.zeros(1), np.zeros(1)
    rule = gauss_hermite(n_nodes)
    return math.sqrt(2.0) * sigma * rule.nodes, np.log(rule.weights) - _LOG_SQRT_PI


def full_loglik_bruteforce(dataset: SparseBinaryDataset, beta, sigma_a: float,
                           sigma_b: float, *, n_nodes: int = 40,
                           max_levels: int = BRUTEFORCE_MAX_LEVELS,
                           chunk: int = 8192) -> float:
    """Exact marginal log-likelihood of the latent threshold model.

    Integrates out the column effects on a full tensor grid (n_nodes per
    column) and, conditionally on those, each row effect by a separate
    one-dimensional rule, exploiting that rows are independent given the
    column effects. Cost grows as n_nodes**n_cols, hence the size guard.
    """
    r_n, c_n = dataset.n_rows, dataset.n_cols
    if r_n > max_levels or c_n > max_levels:
        raise SizeGuardError(
            f"brute force needs at most {max_levels} rows and columns, "
            f"got {r_n} x {c_n}")
    if sigma_a < 0 or sigma_b < 0:
        raise ValueError("variance components must be non-negative")
    beta = np.asarray(beta, dtype=float)

    s_eta = (2.0 * dataset.y - 1.0) * (dataset.x @ beta)
    a_nodes, a_logw = _scaled_rule(float(sigma_a), n_nodes)
    b_nodes, b_logw = _scaled_rule(float(sigma_b), n_nodes)
    k_b = b_nodes.shape[0]

    # per-row cell slices in canonical storage
    row_slices = [dataset.row_view(i) for i in range(r_n)]
    signs = 2.0 * dataset.y - 1.0

    grid_size = k_b ** c_n
    partials = []
    for lo in range(0, grid_size, chunk):
        m = min(chunk, grid_size - lo)
        flat = lo + np.arange(m)
        # decode mixed-radix indices, last column varying fastest
        idx = np.empty((m, c_n), dtype=np.int64)
        rem = flat
        for j in range(c_n - 1, -1, -1):
            idx[:, j] = rem % k_b
            rem = rem // k_b
        b_vals = b_nodes[idx]                      # (m, c_n)
        total = b_logw[idx].sum(axis=1)            # (m,)
        for i in range(r_n):
            sl = row_slices[i]
            if sl.shape[0] == 0:
                continue
            jj = dataset.cols[sl]
            # (m, k_a, q): sign * (eta + a + b_j)
            arg = (s_eta[sl][None, None, :]
                   + signs[sl][None, None, :]
                   * (a_nodes[None, :, None] + b_vals[:, jj][:, None, :]))
            inner = log_ndtr(arg).sum(axis=2) + a_logw[None, :]
            total = total + logsumexp(inner, axis=1)
        partials.append(logsumexp(total))
    return float(logsumexp(np.array(partials)))


@dataclass
class LaplaceFit:
    beta: np.ndarray
    sigma2_a: float
    sigma2_b: float
    loglik: float
    converged: bool
    n_evals: int
    mode_a: Optional[np.ndarray] = None
    mode_b: Optional[np.ndarray] = None
    timings: dict = field(default_factory=dict)


def _penalized_parts(dataset, eta, a, b, s2a, s2b):
    """Value, per-cell residual/weight, and blockwise gradients at (a, b)."""
    full_eta = eta + a[dataset.rows] + b[dataset.cols]
    ll_cell, resid, omega = _pieces(full_eta, dataset.y)
    value = (float(ll_cell.sum())
             - 0.5 * float(a @ a) / s2a - 0.5 * a.shape[0] * math.log(2.0 * math.pi * s2a)
             - 0.5 * float(b @ b) / s2b - 0.5 * b.shape[0] * math.log(2.0 * math.pi * s2b))
    g_a = np.bincount(dataset.rows, weights=resid, minlength=dataset.n_rows) - a / s2a
    g_b = np.bincount(dataset.cols, weights=resid, minlength=dataset.n_cols) - b / s2b
    return value, resid, omega, g_a, g_b


def _schur_pieces(dataset, omega, s2a, s2b):
    """Diagonal blocks and the dense Schur complement on the smaller side.

    The joint curvature is [[D_a, W], [W^T, D_b]] with D_a, D_b diagonal and
    W holding one omega per observed cell. Eliminating the larger diagonal
    block leaves a dense matrix only on the smaller side, so the factor cost
    is min(R, C)^3 regardless of which margin is huge.
    """
    d_a = np.bincount(dataset.rows, weights=omega, minlength=dataset.n_rows) + 1.0 / s2a
    d_b = np.bincount(dataset.cols, weights=omega, minlength=dataset.n_cols) + 1.0 / s2b
    on_b = dataset.n_cols <= dataset.n_rows
    if on_b:
        small_start, small_idx = dataset.row_start, dataset.cols
        d_big, n_small = d_a, dataset.n_cols
        schur = np.diag(d_b.copy())
        n_groups = dataset.n_rows
    else:
        small_start, small_idx = dataset.col_start, None
        d_big, n_small = d_b, dataset.n_rows
        schur = np.diag(d_a.copy())
        n_groups = dataset.n_cols
    for g in range(n_groups):
        lo, hi = small_start[g], small_start[g + 1]
        if hi <= lo:
            continue
        if on_b:
            cells = np.arange(lo, hi)
            jj = small_idx[cells]
        else:
            cells = dataset.col_order[lo:hi]
            jj = dataset.rows[cells]
        w = omega[cells]
        schur[np.ix_(jj, jj)] -= np.outer(w, w) / d_big[g]
    return d_a, d_b, schur, on_b


def _inner_mode(dataset, eta, s2a, s2b, a0=None, b0=None,
                tol: float = INNER_GRAD_TOL, max_iter: int = INNER_MAX_ITER):
    """Newton ascent to the joint mode of the penalized log-likelihood.

    Returns (a, b, value, logdet of the negative curvature) at the mode.
    """
    a = np.zeros(dataset.n_rows) if a0 is None else a0.copy()
    b = np.zeros(dataset.n_cols) if b0 is None else b0.copy()
    value, resid, omega, g_a, g_b = _penalized_parts(dataset, eta, a, b, s2a, s2b)
    for _ in range(max_iter):
        if max(np.abs(g_a).max(initial=0.0), np.abs(g_b).max(initial=0.0)) < tol:
            d_a, d_b, schur, on_b = _schur_pieces(dataset, omega, s2a, s2b)
            cf = cho_factor(schur, lower=True)
            d_big = d_a if on_b else d_b
            logdet = (float(np.log(d_big).sum())
                      + 2.0 * float(np.log(np.diag(cf[0])).sum()))
            return a, b, value, logdet
        d_a, d_b, schur, on_b = _schur_pieces(dataset, omega, s2a, s2b)
        try:
            cf = cho_factor(schur, lower=True)
        except np.linalg.LinAlgError as exc:
            raise OptimizationError("joint curvature not positive definite") from exc
        if on_b:
            t = g_a / d_a
            rhs = g_b - np.bincount(dataset.cols, weights=omega * t[dataset.rows],
                                    minlength=dataset.n_cols)
            db = cho_solve(cf, rhs)
            da = (g_a - np.bincount(dataset.rows, weights=omega * db[dataset.cols],
                                    minlength=dataset.n_rows)) / d_a
        else:
            t = g_b / d_b
            rhs = g_a - np.bincount(dataset.rows, weights=omega * t[dataset.cols],
                                    minlength=dataset.n_rows)
            da = cho_solve(cf, rhs)
            db = (g_b - np.bincount(dataset.cols, weights=omega * da[dataset.rows],
                                    minlength=dataset.n_cols)) / d_b
        step = 1.0
        for _ in range(40):
            a_new, b_new = a + step * da, b + step * db
            new = _penalized_parts(dataset, eta, a_new, b_new, s2a, s2b)
            if new[0] >= value - 1e-12 * (1.0 + abs(value)):
                break
            step *= 0.5
        else:
            raise OptimizationError("joint mode line search failed")
        a, b = a_new, b_new
        value, resid, omega, g_a, g_b = new
    raise OptimizationError("joint mode Newton did not converge")


def laplace_loglik(dataset: SparseBinaryDataset, beta, sigma2_a: float,
                   sigma2_b: float, *, a0=None, b0=None,
                   max_levels: int = LAPLACE_MAX_LEVELS):
    """Laplace-approximate marginal log-likelihood at the given parameters.

    Returns (loglik, mode_a, mode_b) so callers can warm start the next
    evaluation.
    """
    if dataset.n_rows + dataset.n_cols > max_levels:
        raise SizeGuardError(
            f"Laplace path limited to {max_levels} total levels, got "
            f"{dataset.n_rows + dataset.n_cols}")
    if sigma2_a <= 0 or sigma2_b <= 0:
        raise ValueError("laplace_loglik needs strictly positive variances")
    beta = np.asarray(beta, dtype=float)
    eta = dataset.x @ beta
    a, b, value, logdet = _inner_mode(dataset, eta, sigma2_a, sigma2_b,
                                      a0=a0, b0=b0)
    n_u = dataset.n_rows + dataset.n_cols
    return value + 0.5 * n_u * _LOG_2PI - 0.5 * logdet, a, b


def laplace_fit(dataset: SparseBinaryDataset, *, start_beta=None,
                fix_sigma=None, max_levels: int = LAPLACE_MAX_LEVELS,
                maxiter: int = 200) -> LaplaceFit:
    """Maximize the Laplace-approximate likelihood over slopes and variances.

    The outer search runs L-BFGS-B on (beta, log sigma_a, log sigma_b) with
    central finite differences; every inner evaluation reuses the previous
    joint mode as its Newton start. fix_sigma=(0, 0) switches to the plain
    probit model with no random effects.
    """
    t0 = time.perf_counter()
    if dataset.n_rows + dataset.n_cols > max_levels:
        raise SizeGuardError(
            f"Laplace path limited to {max_levels} total levels, got "
            f"{dataset.n_rows + dataset.n_cols}")

    if fix_sigma is not None and float(fix_sigma[0]) == 0.0 \
            and float(fix_sigma[1]) == 0.0:
        marginal = fit_marginal_probit(dataset)
        return LaplaceFit(
            beta=marginal.gamma.copy(), sigma2_a=0.0, sigma2_b=0.0,
            loglik=marginal.loglik, converged=marginal.converged, n_evals=1,
            mode_a=np.zeros(dataset.n_rows), mode_b=np.zeros(dataset.n_cols),
            timings={"total": time.perf_counter() - t0})
    if fix_sigma is not None:
        raise ValueError("fix_sigma supports only (0, 0); otherwise estimate")

    if start_beta is None:
        start_beta = fit_marginal_probit(dataset).gamma
    start_beta = np.asarray(start_beta, dtype=float)
    p = start_beta.shape[0]
    x0 = np.concatenate([start_beta, [math.log(0.5), math.log(0.5)]])
    bounds = [(-50.0, 50.0)] * p + [(math.log(1e-3), math.log(30.0))] * 2

    state = {"a": None, "b": None, "evals": 0}

    def cost(theta):
        state["evals"] += 1
        beta = theta[:p]
        s2a = math.exp(theta[p]) ** 2
        s2b = math.exp(theta[p + 1]) ** 2
        try:
            value, a, b = laplace_loglik(dataset, beta, s2a, s2b,
                                         a0=state["a"], b0=state["b"],
                                         max_levels=max_levels)
        except OptimizationError:
            return 1e10
        state["a"], state["b"] = a, b
        return -value

    res = minimize(cost, x0, method="L-BFGS-B", jac="3-point", bounds=bounds,
                   options={"maxiter": maxiter, "ftol": 1e-11,
                            "finite_diff_rel_step": 1e-5})
    beta_hat = res.x[:p]
    s2a_hat = math.exp(res.x[p]) ** 2
    s2b_hat = math.exp(res.x[p + 1]) ** 2
    value, a, b = laplace_loglik(dataset, beta_hat, s2a_hat, s2b_hat,
                                 a0=state["a"], b0=state["b"],
                                 max_levels=max_levels)
    return LaplaceFit(
        beta=beta_hat, sigma2_a=s2a_hat, sigma2_b=s2b_hat, loglik=float(value),
        converged=bool(res.success), n_evals=state["evals"],
        mode_a=a, mode_b=b,
        timings={"total": time.perf_counter() - t0})
