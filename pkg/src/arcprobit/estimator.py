"""Scikit-learn style wrapper around the composite probit fit.

CrossedProbitRegression exposes the library through the familiar
fit/predict_proba surface so the model drops into pipelines, grid searches
and clones. The two grouping factors are passed to fit as keyword arguments,
since they are observation metadata rather than features.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .arc import fit_arc
from .data import from_cells
from .inference import (
    naive_vcov,
    parametric_bootstrap,
    pigeonhole_bootstrap,
    sandwich_vcov,
)

_SE_METHODS = ("none", "naive", "sandwich", "pigeonhole", "parametric")


class CrossedProbitRegression(BaseEstimator):
    """Probit regression with two crossed Gaussian random effects.

    Fits the regression slopes and both variance components in linear time
    by combining a marginal probit stage with one profile search per
    grouping factor, then prices uncertainty by the requested method.

    Parameters
    ----------
    add_intercept : prepend a constant column to X (default True).
    se_method : "none", "naive", "sandwich" (default), "pigeonhole" or
        "parametric"; the latter two bootstrap with n_bootstrap replicates.
    n_bootstrap, seed, n_jobs : bootstrap controls, ignored otherwise.
    on_separation : "raise" (default) or "flag", forwarded to the probit
        stage when the slopes are not identified.

    Attributes (after fit)
    ----------
    coef_, intercept_ : slopes and intercept on the natural scale.
    gamma_ : marginal-scale coefficients, the ones predictions use.
    sigma2_a_, sigma2_b_ : variance components of the two factors.
    se_beta_, vcov_beta_ : uncertainty of the natural-scale coefficients
        (None when se_method="none").
    fit_result_ : the full fit object, including stage timings.
    """

    def __init__(self, add_intercept: bool = True, se_method: str = "sandwich",
                 n_bootstrap: int = 200, seed: int = 0, n_jobs: int = 1,
                 on_separation: str = "raise"):
        self.add_intercept = add_intercept
        self.se_method = se_method
        self.n_bootstrap = n_bootstrap
        self.seed = seed
        self.n_jobs = n_jobs
        self.on_separation = on_separation

    def fit(self, X, y, rows=None, cols=None):
        if self.se_method not in _SE_METHODS:
            raise ValueError(f"se_method must be one of {_SE_METHODS}")
        if rows is None or cols is None:
            raise ValueError("fit needs rows= and cols= grouping labels")
        X, y = check_X_y(X, y, dtype=float, ensure_min_samples=2)
        classes = np.unique(np.asarray(y))
        if classes.shape[0] != 2:
            raise ValueError(
                f"response must take exactly two values, got {classes!r}")
        y01 = (np.asarray(y) == classes[1]).astype(float)

        rows = np.asarray(rows)
        cols = np.asarray(cols)
        if rows.shape[0] != X.shape[0] or cols.shape[0] != X.shape[0]:
            raise ValueError("rows and cols must have one label per sample")
        # sorted unique labels make the dense ids independent of input order
        row_labels, row_idx = np.unique(rows, return_inverse=True)
        col_labels, col_idx = np.unique(cols, return_inverse=True)

        n, p = X.shape
        names = [f"x{k}" for k in range(1, p + 1)]
        if self.add_intercept:
            X_full = np.column_stack([np.ones(n), X])
            names = ["(intercept)"] + names
        else:
            X_full = X
        dataset = from_cells(X_full, y01, rows=row_idx, cols=col_idx,
                             n_rows=row_labels.shape[0],
                             n_cols=col_labels.shape[0],
                             feature_names=names,
                             row_labels=row_labels, col_labels=col_labels,
                             has_intercept=self.add_intercept)

        result = fit_arc(dataset, on_separation=self.on_separation)
        self.fit_result_ = result
        self.classes_ = classes
        self.n_features_in_ = p
        self.row_labels_ = row_labels
        self.col_labels_ = col_labels
        self.gamma_ = result.working.gamma.copy()
        beta = result.natural.beta
        if self.add_intercept:
            self.intercept_ = float(beta[0])
            self.coef_ = beta[1:].copy()
        else:
            self.intercept_ = 0.0
            self.coef_ = beta.copy()
        self.sigma2_a_ = result.natural.sigma2_a
        self.sigma2_b_ = result.natural.sigma2_b

        self.vcov_beta_ = None
        self.se_beta_ = None
        s2a, s2b = result.natural.sigma2_a, result.natural.sigma2_b
        if self.se_method in ("naive", "sandwich"):
            if self.se_method == "naive":
                vc = naive_vcov(result.marginal.info, sigma2_a=s2a,
                                sigma2_b=s2b)
            else:
                vc = sandwich_vcov(dataset, result.working.gamma,
                                   result.marginal.info,
                                   sigma2_a=s2a, sigma2_b=s2b)
            self.vcov_beta_ = vc.vcov_beta
            self.se_beta_ = vc.se_beta
        elif self.se_method == "pigeonhole":
            boot = pigeonhole_bootstrap(dataset, result,
                                        n_replicates=self.n_bootstrap,
                                        seed=self.seed, n_jobs=self.n_jobs)
            self.vcov_beta_ = boot.vcov_beta
            self.se_beta_ = boot.se_beta
        elif self.se_method == "parametric":
            boot = parametric_bootstrap(dataset, result.natural,
                                        n_replicates=self.n_bootstrap,
                                        seed=self.seed, n_jobs=self.n_jobs)
            self.vcov_beta_ = boot.vcov_beta
            self.se_beta_ = boot.se_beta
        return self

    def _marginal_eta(self, X):
        check_is_fitted(self, "gamma_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features; expected {self.n_features_in_}")
        if self.add_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        return X @ self.gamma_

    def predict_proba(self, X):
        """Marginal P(y = classes_[1] | x), random effects integrated out."""
        eta = self._marginal_eta(X)
        p1 = ndtr(eta)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[(proba[:, 1] >= 0.5).astype(int)]
