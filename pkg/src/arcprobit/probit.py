"""Marginal probit fit: the "all" block of the composite likelihood.

Maximizes sum of w_ij * [y log Phi(x'g) + (1-y) log Phi(-x'g)] by Newton
iterations with observed information and step-halving. Cross-observation
reductions go through np.einsum's non-BLAS path so results do not depend on
BLAS threading; combined with canonical cell order this makes fits bitwise
reproducible.

Divergence of the iterates is screened by a cheap heuristic and then
certified with an LP feasibility check for (quasi-)separation before the
fitter gives up.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.optimize import linprog
from scipy.special import log_ndtr

from .data import SparseBinaryDataset
from .errors import NonConvergenceError, RankDeficiencyError, SeparationError
from .numerics import std_normal_quantile

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

GRAD_TOL = 1e-6
LOGLIK_RTOL = 1e-10
MAX_ITER = 100

# divergence screen; only a certificate can declare separation
_NORM_HEURISTIC = 1e3
_ETA_HEURISTIC = 30.0
# at convergence, fitted probabilities this deep in the tails (|eta| > 8 puts
# them within 1e-15 of 0 or 1) are screened too: under separation the score
# meets its tolerance long before the divergence screen can fire
_ETA_CONVERGED_HEURISTIC = 8.0
_LL_PERFECT_HEURISTIC = 1e-8

# smallest log-likelihood change float64 can resolve at the current magnitude;
# below it, monotone line searches stall on rounding ties and the predicted
# Newton improvement means nothing
def _resolution_floor(ll: float) -> float:
    return 8.0 * np.finfo(float).eps * (1.0 + abs(ll))


@dataclass
class MarginalFit:
    gamma: np.ndarray
    loglik: float
    info: np.ndarray
    n_iter: int
    converged: bool
    separation: bool = False


def _pieces(eta: np.ndarray, y: np.ndarray):
    """Per-cell log-probabilities, score residuals and information weights."""
    lp = log_ndtr(eta)
    lm = log_ndtr(-eta)
    log_phi = -0.5 * eta * eta - _LOG_SQRT_2PI
    m_p = np.exp(log_phi - lp)      # mills(eta)
    m_m = np.exp(log_phi - lm)      # mills(-eta)
    ll_cell = y * lp + (1.0 - y) * lm
    resid = y * m_p - (1.0 - y) * m_m
    omega = y * m_p * (m_p + eta) + (1.0 - y) * m_m * (m_m - eta)
    return ll_cell, resid, omega


def score_obs(gamma, x, y):
    """Per-observation score of the marginal probit log-likelihood.

    Equals phi(eta) (y - Phi(eta)) x / (Phi(eta) Phi(-eta)), computed in the
    cancellation-free form y mills(eta) x - (1-y) mills(-eta) x. Accepts a
    single observation or stacked arrays.
    """
    gamma = np.asarray(gamma, dtype=float)
    x = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    eta = x2 @ gamma
    _, resid, _ = _pieces(eta, np.atleast_1d(y_arr))
    u = resid[:, None] * x2
    return u[0] if single else u


def _loglik_score_info(x, y, w, gamma, want_info=True):
    eta = x @ gamma
    ll_cell, resid, omega = _pieces(eta, y)
    if w is None:
        ll = float(np.sum(ll_cell))
        score = np.einsum("n,np->p", resid, x)
        info = np.einsum("n,np,nq->pq", omega, x, x) if want_info else None
    else:
        ll = float(np.einsum("n,n->", w, ll_cell))
        score = np.einsum("n,np->p", w * resid, x)
        info = np.einsum("n,np,nq->pq", w * omega, x, x) if want_info else None
    return eta, ll, score, info


def _loglik_only(x, y, w, gamma):
    eta = x @ gamma
    lp = log_ndtr(eta)
    lm = log_ndtr(-eta)
    ll_cell = y * lp + (1.0 - y) * lm
    return float(np.sum(ll_cell) if w is None else np.einsum("n,n->", w, ll_cell))


def _diagnose_rank(x, w_omega, feature_names):
    sqrt_w = np.sqrt(np.maximum(w_omega, 0.0))
    _, r, piv = sla.qr(sqrt_w[:, None] * x, mode="economic", pivoting=True)
    d = np.abs(np.diag(r))
    thresh = d[0] * max(x.shape) * np.finfo(float).eps if d[0] > 0 else 0.0
    bad = np.where(d <= thresh)[0]
    k = piv[bad[0]] if bad.size else piv[-1]
    name = feature_names[k] if feature_names is not None else f"column {k}"
    raise RankDeficiencyError(
        f"design matrix is numerically rank deficient; column {name!r} is "
        "linearly dependent on the others"
    )


def _certify_separation(x, y, w=None) -> bool:
    """LP feasibility certificate for complete or quasi-complete separation.

    Looks for v with s_c x_c'v >= 0 on every cell (s_c = 2 y_c - 1) and a
    strictly positive total margin. Feasible exactly when some direction
    never decreases the likelihood without bound being blocked.
    """
    s = 2.0 * y - 1.0
    sx = s[:, None] * x
    if w is not None:
        sx = sx[w > 0]
    sx = np.unique(sx, axis=0)
    p = x.shape[1]
    a_ub = np.vstack([-sx, -np.sum(sx, axis=0, keepdims=True)])
    b_ub = np.concatenate([np.zeros(sx.shape[0]), [-1.0]])
    res = linprog(np.zeros(p), A_ub=a_ub, b_ub=b_ub,
                  bounds=[(None, None)] * p, method="highs")
    return res.status == 0


def detect_separation(dataset: SparseBinaryDataset, gamma) -> bool:
    """Screen an iterate for divergence; certify via LP before saying yes."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))[-1]
    eta = dataset.x @ gamma
    fired = (np.linalg.norm(gamma) > _NORM_HEURISTIC
             or np.max(np.abs(eta)) > _ETA_HEURISTIC)
    if not fired:
        return False
    certified = _certify_separation(dataset.x, dataset.y)
    if not certified:
        warnings.warn("divergence heuristic fired but no separation "
                      "certificate was found; treating as not separated")
    return certified


def fit_marginal_probit(dataset: SparseBinaryDataset, *, weights=None,
                        gamma0=None, max_iter: int = MAX_ITER,
                        grad_tol: float = GRAD_TOL,
                        loglik_rtol: float = LOGLIK_RTOL,
                        on_separation: str = "raise") -> MarginalFit:
    """Newton fit of the marginal probit block.

    Starts at zero with the intercept (when present) at Phi^{-1}(mean y),
    halves steps until the log-likelihood does not decrease by more than the
    float64 resolution of its magnitude, and stops when max |score| < grad_tol
    and the relative log-likelihood change is below loglik_rtol, or when the
    Newton-predicted improvement falls below that resolution (on large data
    the gradient tolerance can sit below what the summed log-likelihood can
    resolve). Certified separation raises SeparationError unless
    on_separation="flag"; hitting the iteration cap raises
    NonConvergenceError carrying the last iterate.
    """
    x, y = dataset.x, dataset.y
    w = None if weights is None else np.asarray(weights, dtype=float)
    n, p = x.shape

    if gamma0 is not None:
        gamma = np.asarray(gamma0, dtype=float).copy()
    else:
        gamma = np.zeros(p)
        if dataset.has_intercept:
            ybar = float(np.mean(y) if w is None else
                         (np.einsum("n,n->", w, y) / max(np.sum(w), 1e-12)))
            gamma[0] = std_normal_quantile(ybar)

    ll_prev = None
    sep_checked = False

    def finish(gamma, eta, ll, info, it):
        # a vanishing per-cell log-likelihood means every fitted probability
        # sits on its response: a perfect fit, which only separation
        # produces, even when eta stays moderate
        nonlocal sep_checked
        total_w = float(n) if w is None else max(float(np.sum(w)), 1.0)
        perfect = ll / total_w > -_LL_PERFECT_HEURISTIC
        if not sep_checked and (perfect or
                                np.max(np.abs(eta)) > _ETA_CONVERGED_HEURISTIC):
            sep_checked = True
            if _certify_separation(x, y, w):
                if on_separation == "flag":
                    return MarginalFit(gamma=gamma, loglik=ll, info=info,
                                       n_iter=it, converged=False,
                                       separation=True)
                raise SeparationError(
                    "complete or quasi-complete separation certified; the "
                    "marginal probit estimate diverges", gamma=gamma)
        return MarginalFit(gamma=gamma, loglik=ll, info=info,
                           n_iter=it, converged=True)

    for it in range(max_iter + 1):
        eta, ll, score, info = _loglik_score_info(x, y, w, gamma)
        gmax = float(np.max(np.abs(score))) if p else 0.0
        rel_change = 0.0 if ll_prev is None else abs(ll - ll_prev) / (1.0 + abs(ll))
        if gmax < grad_tol and (ll_prev is None or rel_change < loglik_rtol):
            return finish(gamma, eta, ll, info, it)

        if not sep_checked and (np.linalg.norm(gamma) > _NORM_HEURISTIC
                                or np.max(np.abs(eta)) > _ETA_HEURISTIC):
            sep_checked = True
            if _certify_separation(x, y, w):
                if on_separation == "flag":
                    return MarginalFit(gamma=gamma, loglik=ll, info=info,
                                       n_iter=it, converged=False,
                                       separation=True)
                raise SeparationError(
                    "complete or quasi-complete separation certified; the "
                    "marginal probit estimate diverges", gamma=gamma)
            warnings.warn("divergence heuristic fired but no separation "
                          "certificate was found; continuing")

        if it == max_iter:
            break

        try:
            c, low = sla.cho_factor(info)
            step = sla.cho_solve((c, low), score)
        except (sla.LinAlgError, ValueError):
            omega_w = _pieces(eta, y)[2]
            _diagnose_rank(x, omega_w if w is None else w * omega_w,
                           dataset.feature_names)

        floor = _resolution_floor(ll)
        if 0.5 * float(score @ step) <= floor:
            # the Newton model predicts an improvement below what the float
            # representation of the log-likelihood can express: stationary
            return finish(gamma, eta, ll, info, it)

        # step halving: never accept a resolvable decrease of the objective
        t = 1.0
        while t > 2.0**-40:
            ll_new = _loglik_only(x, y, w, gamma + t * step)
            if ll_new >= ll - floor:
                break
            t *= 0.5
        else:
            # no improving step: accept the point only if already near-stationary
            if gmax < grad_tol:
                return MarginalFit(gamma=gamma, loglik=ll, info=info,
                                   n_iter=it, converged=True)
            raise NonConvergenceError(
                "line search could not improve the probit log-likelihood",
                last_iterate=gamma)
        gamma = gamma + t * step
        ll_prev = ll

    raise NonConvergenceError(
        f"probit Newton did not converge in {max_iter} iterations",
        last_iterate=gamma)
