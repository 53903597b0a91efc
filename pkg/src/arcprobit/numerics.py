"""Stable standard-normal primitives and a bounded 1-d maximizer.

All probability work downstream runs through these helpers so that tail
behaviour is controlled in exactly one place: log-cdf values stay finite for
|z| <= 40, cdf outputs are clamped away from exact 0 and 1, and the Mills
ratio phi(z)/Phi(z) is computed in log space to survive z far below -8.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .errors import OptimizationError

# Probabilities are clamped into this interval before any direct use in logs
# or divisions. log-space paths (log_std_normal_cdf) do not need the clamp.
PROB_FLOOR = 1e-300
PROB_CEIL = 1.0 - 1e-16

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_finite(z, name: str):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{name}: non-finite input")
    return z


def clamp_probability(p):
    """Clamp probabilities into [PROB_FLOOR, PROB_CEIL]."""
    return np.clip(p, PROB_FLOOR, PROB_CEIL)


def std_normal_cdf(z):
    """Phi(z), clamped away from exact 0 and 1. Scalar in, scalar out."""
    zv = _check_finite(z, "std_normal_cdf")
    out = clamp_probability(special.ndtr(zv))
    return float(out) if np.isscalar(z) or np.ndim(z) == 0 else out


def std_normal_pdf(z):
    """phi(z), the standard normal density."""
    zv = _check_finite(z, "std_normal_pdf")
    out = np.exp(-0.5 * zv * zv - _LOG_SQRT_2PI)
    return float(out) if np.isscalar(z) or np.ndim(z) == 0 else out


def log_std_normal_cdf(z):
    """log Phi(z), finite and strictly increasing over the working range."""
    zv = _check_finite(z, "log_std_normal_cdf")
    out = special.log_ndtr(zv)
    return float(out) if np.isscalar(z) or np.ndim(z) == 0 else out


def std_normal_quantile(p):
    """Phi^{-1}(p) for p in (0, 1)."""
    pv = np.clip(np.asarray(p, dtype=float), 1e-12, 1.0 - 1e-12)
    out = special.ndtri(pv)
    return float(out) if np.isscalar(p) or np.ndim(p) == 0 else out


def mills_ratio(z):
    """phi(z)/Phi(z), evaluated as exp(log phi - log Phi).

    Positive and finite down to z = -40; decays like phi(z) for large
    positive z and grows like |z| for large negative z.
    """
    zv = _check_finite(z, "mills_ratio")
    out = np.exp(-0.5 * zv * zv - _LOG_SQRT_2PI - special.log_ndtr(zv))
    return float(out) if np.isscalar(z) or np.ndim(z) == 0 else out


def _eval_checked(f, x: float) -> float:
    fx = float(f(x))
    if not math.isfinite(fx):
        raise OptimizationError(f"objective returned non-finite value at x={x!r}")
    return fx


def brent_maximize(f, lo: float, hi: float, tol: float = 1e-8, max_iter: int = 200):
    """Maximize a scalar function on [lo, hi] by Brent's method.

    Golden-section steps with parabolic acceleration, never evaluating
    outside the interval. After the interior search the endpoints are
    evaluated too and the best of the three candidates is returned, so a
    monotone objective yields exactly lo or hi.

    :param f: scalar function of one variable; must be finite on [lo, hi].
    :param lo: lower bound of the search interval.
    :param hi: upper bound, must exceed lo.
    :param tol: absolute tolerance on the abscissa.
    :param max_iter: cap on interior function evaluations.
    :return: (x, f(x)) at the best candidate found.
    """
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise ValueError(f"invalid interval [{lo}, {hi}]")

    golden = 0.5 * (3.0 - math.sqrt(5.0))
    sqrt_eps = math.sqrt(2.2e-16)

    # Brent local minimizer applied to -f.
    a, b = lo, hi
    xf = a + golden * (b - a)
    nfc = fulc = xf
    rat = e = 0.0
    x = xf
    fx = -_eval_checked(f, x)
    num = 1
    ffulc = fnfc = fx
    xm = 0.5 * (a + b)
    tol1 = sqrt_eps * abs(xf) + tol / 3.0
    tol2 = 2.0 * tol1

    while abs(xf - xm) > (tol2 - 0.5 * (b - a)):
        use_golden = True
        if abs(e) > tol1:
            # try a parabolic step through (xf, nfc, fulc)
            r = (xf - nfc) * (fx - ffulc)
            q = (xf - fulc) * (fx - fnfc)
            p = (xf - fulc) * q - (xf - nfc) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            r = e
            e = rat
            if (abs(p) < abs(0.5 * q * r)) and (p > q * (a - xf)) and (p < q * (b - xf)):
                use_golden = False
                rat = p / q
                x = xf + rat
                if (x - a) < tol2 or (b - x) < tol2:
                    si = 1.0 if xm - xf >= 0 else -1.0
                    rat = tol1 * si
        if use_golden:
            e = (a if xf >= xm else b) - xf
            rat = golden * e

        si = 1.0 if rat >= 0 else -1.0
        x = xf + si * max(abs(rat), tol1)
        fu = -_eval_checked(f, x)
        num += 1

        if fu <= fx:
            if x >= xf:
                a = xf
            else:
                b = xf
            fulc, ffulc = nfc, fnfc
            nfc, fnfc = xf, fx
            xf, fx = x, fu
        else:
            if x < xf:
                a = x
            else:
                b = x
            if fu <= fnfc or nfc == xf:
                fulc, ffulc = nfc, fnfc
                nfc, fnfc = x, fu
            elif fu <= ffulc or fulc == xf or fulc == nfc:
                fulc, ffulc = x, fu

        xm = 0.5 * (a + b)
        tol1 = sqrt_eps * abs(xf) + tol / 3.0
        tol2 = 2.0 * tol1
        if num >= max_iter:
            break

    # Endpoint sweep: monotone objectives must return the exact boundary.
    best_x, best_f = xf, -fx
    for cand in (lo, hi):
        fc = _eval_checked(f, cand)
        if fc > best_f:
            best_x, best_f = cand, fc
    return best_x, best_f
