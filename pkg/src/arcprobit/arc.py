"""The all-row-column composite likelihood fit.

Three one-dimensional stages, each O(N):

1. the marginal "all" probit block gives the rescaled coefficients gamma;
2. a row-clustered hierarchical likelihood, profiled at gamma, gives the
   row variance on the working scale tau2_a by bounded Brent search;
3. the column-clustered mirror image gives tau2_b.

Working-scale estimates are then inverted back to the natural scale:
sigma2_a = tau2_a (1 + tau2_b) / (1 - tau2_a tau2_b) and symmetrically,
beta = gamma * sqrt(1 + sigma2_a + sigma2_b). Rows (or columns) with a
single observation contribute a tau2-free constant to their profile and are
folded in once; clusters are integrated with mode-centered Gauss-Hermite
rules whose size grows with the cluster count.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr, logsumexp

from .data import SparseBinaryDataset
from .errors import QuadratureUnderflowError
from .numerics import brent_maximize
from .probit import MarginalFit, fit_marginal_probit
from .quadrature import GaussHermiteRule, gauss_hermite, node_count

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

TAU2_MAX = 100.0
BRENT_TOL = 1e-8
MODE_TOL = 1e-9


@dataclass(frozen=True)
class WorkingParams:
    """Estimates on the scale the three stages actually search."""

    gamma: np.ndarray
    tau2_a: float
    tau2_b: float


@dataclass(frozen=True)
class NaturalParams:
    beta: np.ndarray
    sigma2_a: float
    sigma2_b: float


def reparam(natural: NaturalParams) -> WorkingParams:
    """Natural to working scale; the map the composite stages estimate."""
    s2a, s2b = float(natural.sigma2_a), float(natural.sigma2_b)
    if s2a < 0 or s2b < 0:
        raise ValueError("variance components must be non-negative")
    denom = 1.0 + s2a + s2b
    return WorkingParams(
        gamma=np.asarray(natural.beta, dtype=float) / math.sqrt(denom),
        tau2_a=s2a / (1.0 + s2b),
        tau2_b=s2b / (1.0 + s2a),
    )


def back_transform(working: WorkingParams):
    """Invert the working-scale map; returns (NaturalParams, fallback_flag).

    The inverse exists only when tau2_a * tau2_b < 1; the estimated pair can
    land outside that region in finite samples, in which case both variances
    fall back to 0 and the flag is set.
    """
    t2a, t2b = float(working.tau2_a), float(working.tau2_b)
    gamma = np.asarray(working.gamma, dtype=float)
    prod = t2a * t2b
    if prod >= 1.0:
        warnings.warn("tau2_a * tau2_b >= 1: outside the invertible region; "
                      "falling back to sigma2_a = sigma2_b = 0")
        return NaturalParams(beta=gamma.copy(), sigma2_a=0.0, sigma2_b=0.0), True
    s2a = t2a * (1.0 + t2b) / (1.0 - prod)
    s2b = t2b * (1.0 + t2a) / (1.0 - prod)
    beta = gamma * math.sqrt(1.0 + s2a + s2b)
    return NaturalParams(beta=beta, sigma2_a=s2a, sigma2_b=s2b), False


class _SideWorkspace:
    """Cluster-grouped cell arrays for one side, reused across Brent evals.

    Cells of weight zero are dropped; weight-one singletons contribute the
    tau2-free constant y log Phi(eta_hat) + (1-y) log Phi(-eta_hat). What
    remains is grouped contiguously so per-cluster sums are reduceat calls.
    """

    def __init__(self, dataset, eta_hat, weights, side):
        if side == "row":
            counts = dataset.row_counts
            eta_o, y_o = eta_hat, dataset.y
            w_o = weights
        else:
            order = dataset.col_order
            counts = dataset.col_counts
            eta_o, y_o = eta_hat[order], dataset.y[order]
            w_o = None if weights is None else np.asarray(weights)[order]

        n_clusters = counts.shape[0]
        cell_cluster = np.repeat(np.arange(n_clusters), counts)
        if w_o is not None:
            w_o = np.asarray(w_o, dtype=float)
            nz = w_o > 0
            eta_o, y_o, w_o = eta_o[nz], y_o[nz], w_o[nz]
            cell_cluster = cell_cluster[nz]
            counts = np.bincount(cell_cluster, minlength=n_clusters)

        if w_o is None:
            single = counts == 1
        else:
            wsum = np.bincount(cell_cluster, weights=w_o, minlength=n_clusters)
            single = (counts == 1) & (wsum == 1.0)
        active = counts >= 1
        active &= ~single

        single_cell = single[cell_cluster]
        const_ll = (y_o * log_ndtr(eta_o) + (1.0 - y_o) * log_ndtr(-eta_o))[single_cell]
        if w_o is not None:
            const_ll = const_ll * w_o[single_cell]
        self.const = float(np.sum(const_ll))

        keep = active[cell_cluster]
        self.eta = np.ascontiguousarray(eta_o[keep])
        self.y = np.ascontiguousarray(y_o[keep])
        self.w = None if w_o is None else np.ascontiguousarray(w_o[keep])
        kept_counts = counts[active]
        self.offsets = np.concatenate(([0], np.cumsum(kept_counts)))[:-1]
        self.cell_cluster = np.repeat(np.arange(kept_counts.shape[0]), kept_counts)
        self.cluster_ids = np.where(active)[0]
        self.n_active = int(kept_counts.shape[0])
        self.u = np.zeros(self.n_active)
        self.mode_fallbacks = 0

    def _derivs(self, eta_a, u):
        """Per-cluster gradient pieces of the log-integrand at offsets u."""
        t = eta_a + u[self.cell_cluster]
        lp, lm = log_ndtr(t), log_ndtr(-t)
        log_phi = -0.5 * t * t - _LOG_SQRT_2PI
        m_p = np.exp(log_phi - lp)
        m_m = np.exp(log_phi - lm)
        r = self.y * m_p - (1.0 - self.y) * m_m
        om = self.y * m_p * (m_p + t) + (1.0 - self.y) * m_m * (m_m - t)
        if self.w is not None:
            r = r * self.w
            om = om * self.w
        return (np.add.reduceat(r, self.offsets),
                np.add.reduceat(om, self.offsets))

    def _cell_loglik_sums(self, eta_a, u):
        t = eta_a + u[self.cell_cluster]
        cl = self.y * log_ndtr(t) + (1.0 - self.y) * log_ndtr(-t)
        if self.w is not None:
            cl = cl * self.w
        return np.add.reduceat(cl, self.offsets)

    def _solve_modes(self, eta_a, tau2):
        """Vectorized safeguarded Newton for every cluster mode at once.

        The log-integrand is strictly concave (probit information weights are
        positive), so its derivative brackets a unique root; Newton steps that
        leave the bracket are replaced by bisection.
        """
        u = self.u.copy()
        width = 1.0 + 2.0 * math.sqrt(tau2)
        lo, hi = u - width, u + width
        for _ in range(80):
            g_lo = self._derivs(eta_a, lo)[0] - lo / tau2
            g_hi = self._derivs(eta_a, hi)[0] - hi / tau2
            need_lo, need_hi = g_lo < 0.0, g_hi > 0.0
            if not (need_lo.any() or need_hi.any()):
                break
            lo = np.where(need_lo, lo - width, lo)
            hi = np.where(need_hi, hi + width, hi)
            width *= 2.0

        u = np.clip(u, lo, hi)
        converged = np.zeros(self.n_active, dtype=bool)
        for _ in range(50):
            s_sum, om_sum = self._derivs(eta_a, u)
            g1 = s_sum - u / tau2
            lo = np.where(g1 > 0.0, u, lo)
            hi = np.where(g1 < 0.0, u, hi)
            converged |= np.abs(g1) <= MODE_TOL
            if converged.all():
                break
            step = g1 / (om_sum + 1.0 / tau2)
            u_new = u + step
            outside = (u_new <= lo) | (u_new >= hi)
            u_new = np.where(outside, 0.5 * (lo + hi), u_new)
            u = np.where(converged, u, u_new)

        if not converged.all():
            # keep the integral valid with the prior center for the stragglers
            n_bad = int(np.sum(~converged))
            self.mode_fallbacks += n_bad
            warnings.warn(f"{n_bad} cluster mode(s) did not reach the residual "
                          "target in 50 iterations; using the prior center")
            u = np.where(converged, u, 0.0)
        _, om_sum = self._derivs(eta_a, u)
        curv = om_sum + 1.0 / tau2
        curv = np.where(converged, curv, 1.0 / tau2)
        self.u = u
        return u, curv

    def loglik(self, tau2: float, rule: GaussHermiteRule) -> float:
        """Profile log-likelihood of this side at tau2 (plus its constant)."""
        if tau2 < 0:
            raise ValueError("tau2 must be non-negative")
        if self.n_active == 0:
            return self.const
        if tau2 == 0.0:
            return self.const + float(np.sum(self._cell_loglik_sums(self.eta, np.zeros(self.n_active))))

        scale = math.sqrt(1.0 + tau2)
        eta_a = self.eta * scale
        u_hat, curv = self._solve_modes(eta_a, tau2)
        s = np.sqrt(2.0 / curv)

        acc = np.empty((self.n_active, rule.k))
        for t in range(rule.k):
            u_t = u_hat + s * rule.nodes[t]
            h = self._cell_loglik_sums(eta_a, u_t)
            acc[:, t] = (math.log(rule.weights[t]) + rule.nodes[t] ** 2
                         + h - u_t * u_t / (2.0 * tau2))
        log_int = (logsumexp(acc, axis=1) + 0.5 * np.log(2.0 / curv)
                   - 0.5 * math.log(tau2) - _LOG_SQRT_2PI)
        if np.any(np.isneginf(log_int)) or np.any(np.isnan(log_int)):
            bad = int(self.cluster_ids[int(np.argmax(~np.isfinite(log_int)))])
            raise QuadratureUnderflowError(
                f"cluster {bad}: all quadrature nodes underflowed")
        return self.const + float(np.sum(log_int))


def _profile_side(dataset, gamma_hat, tau2, side, rule=None, weights=None) -> float:
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    eta_hat = dataset.x @ gamma_hat
    ws = _SideWorkspace(dataset, eta_hat, weights, side)
    if rule is None:
        n_side = dataset.n_rows if side == "row" else dataset.n_cols
        rule = gauss_hermite(node_count(n_side))
    return ws.loglik(float(tau2), rule)


def row_profile_loglik(tau2_a, dataset, gamma_hat, rule=None, weights=None) -> float:
    """Row-clustered hierarchical log-likelihood at gamma_hat, one shot."""
    return _profile_side(dataset, gamma_hat, tau2_a, "row", rule, weights)


def col_profile_loglik(tau2_b, dataset, gamma_hat, rule=None, weights=None) -> float:
    """Column-clustered mirror image of row_profile_loglik."""
    return _profile_side(dataset, gamma_hat, tau2_b, "col", rule, weights)


@dataclass
class ArcFit:
    working: WorkingParams
    natural: NaturalParams
    marginal: MarginalFit
    row_loglik: float
    col_loglik: float
    fallback_applied: bool
    k_row: int
    k_col: int
    timings: dict = field(default_factory=dict)
    messages: tuple = ()


def fit_arc(dataset: SparseBinaryDataset, *, weights=None,
            tau2_max: float = TAU2_MAX, brent_tol: float = BRENT_TOL,
            k_row: int | None = None, k_col: int | None = None,
            on_separation: str = "raise", max_iter: int = 100) -> ArcFit:
    """Run the three composite stages and invert to the natural scale.

    Parameters
    ----------
    dataset : canonical sparse layout with views built.
    weights : optional non-negative per-cell weights (bootstrap replicates).
    tau2_max : upper end of both working-variance searches.
    brent_tol : absolute abscissa tolerance of the Brent searches.
    k_row, k_col : quadrature sizes; default is the node-count rule on the
        number of rows / columns.
    on_separation : "raise" (default) or "flag", forwarded to the probit stage.
    """
    messages = []
    t0 = time.perf_counter()
    marginal = fit_marginal_probit(dataset, weights=weights,
                                   max_iter=max_iter, on_separation=on_separation)
    t_marginal = time.perf_counter() - t0

    eta_hat = dataset.x @ marginal.gamma
    k_row = node_count(dataset.n_rows) if k_row is None else int(k_row)
    k_col = node_count(dataset.n_cols) if k_col is None else int(k_col)
    rule_row, rule_col = gauss_hermite(k_row), gauss_hermite(k_col)

    t0 = time.perf_counter()
    ws_row = _SideWorkspace(dataset, eta_hat, weights, "row")
    if ws_row.n_active == 0:
        msg = "no row holds two or more observations; tau2_a fixed at 0"
        warnings.warn(msg)
        messages.append(msg)
        tau2_a, row_ll = 0.0, ws_row.loglik(0.0, rule_row)
    else:
        tau2_a, row_ll = brent_maximize(
            lambda t2: ws_row.loglik(t2, rule_row), 0.0, tau2_max, tol=brent_tol)
    t_row = time.perf_counter() - t0

    t0 = time.perf_counter()
    ws_col = _SideWorkspace(dataset, eta_hat, weights, "col")
    if ws_col.n_active == 0:
        msg = "no column holds two or more observations; tau2_b fixed at 0"
        warnings.warn(msg)
        messages.append(msg)
        tau2_b, col_ll = 0.0, ws_col.loglik(0.0, rule_col)
    else:
        tau2_b, col_ll = brent_maximize(
            lambda t2: ws_col.loglik(t2, rule_col), 0.0, tau2_max, tol=brent_tol)
    t_col = time.perf_counter() - t0

    working = WorkingParams(gamma=marginal.gamma, tau2_a=tau2_a, tau2_b=tau2_b)
    natural, fallback = back_transform(working)
    if fallback:
        messages.append("tau2_a * tau2_b >= 1: variance components fell back to 0")

    return ArcFit(
        working=working, natural=natural, marginal=marginal,
        row_loglik=row_ll, col_loglik=col_ll, fallback_applied=fallback,
        k_row=k_row, k_col=k_col,
        timings={"marginal": t_marginal, "row": t_row, "col": t_col,
                 "total": t_marginal + t_row + t_col},
        messages=tuple(messages),
    )
