import numpy as np
import pytest

from arcprobit.arc import fit_arc
from arcprobit.data import from_cells
from arcprobit.errors import BootstrapError, RankDeficiencyError
from arcprobit.inference import (
    _psd_project,
    naive_vcov,
    parametric_bootstrap,
    pigeonhole_bootstrap,
    sandwich_vcov,
    score_blocks,
    vcov_beta_plugin,
)
from arcprobit.probit import fit_marginal_probit, score_obs
from conftest import crossed_dataset


def test_score_blocks_group_sums():
    ds = crossed_dataset(seed=1)
    fit = fit_marginal_probit(ds)
    blocks = score_blocks(ds, fit.gamma)
    # row sums recomputed with explicit masks
    for i in (0, 3, ds.n_rows - 1):
        mask = ds.rows == i
        assert np.allclose(blocks.u_rows[i], blocks.u_cells[mask].sum(axis=0))
    for j in (0, ds.n_cols - 1):
        mask = ds.cols == j
        assert np.allclose(blocks.u_cols[j], blocks.u_cells[mask].sum(axis=0))
    # total score vanishes at the maximizer
    assert np.max(np.abs(blocks.u_cells.sum(axis=0))) < 1e-6


def sandwich_loop_oracle(ds, gamma, info):
    """Plain-loop recomputation of the two-way robust covariance."""
    p = len(gamma)
    va = np.zeros((p, p))
    vb = np.zeros((p, p))
    vc = np.zeros((p, p))
    for i in range(ds.n_rows):
        s = np.zeros(p)
        for c in np.where(ds.rows == i)[0]:
            s += score_obs(gamma, ds.x[c], ds.y[c])
        va += np.outer(s, s)
    for j in range(ds.n_cols):
        s = np.zeros(p)
        for c in np.where(ds.cols == j)[0]:
            s += score_obs(gamma, ds.x[c], ds.y[c])
        vb += np.outer(s, s)
    for c in range(ds.n_cells):
        u = score_obs(gamma, ds.x[c], ds.y[c])
        vc += np.outer(u, u)
    bread = np.linalg.inv(info)
    return bread @ (va + vb - vc) @ bread


def test_sandwich_matches_loop_oracle():
    ds = crossed_dataset(n_rows=12, n_cols=9, seed=2)
    fit = fit_marginal_probit(ds)
    res = sandwich_vcov(ds, fit.gamma, fit.info)
    want = sandwich_loop_oracle(ds, fit.gamma, fit.info)
    assert np.max(np.abs(res.vcov_gamma - want)) < 1e-12
    assert res.n_clipped_eigenvalues == 0


def test_all_unique_clusters_collapse_the_blocks():
    rng = np.random.default_rng(3)
    n = 50
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.integers(0, 2, n).astype(float)
    ds = from_cells(x, y, rows=np.arange(n), cols=np.arange(n),
                    feature_names=["(intercept)", "f1"])
    gamma = np.array([0.2, -0.4])
    blocks = score_blocks(ds, gamma)
    va = blocks.u_rows.T @ blocks.u_rows
    vb = blocks.u_cols.T @ blocks.u_cols
    vc = blocks.u_cells.T @ blocks.u_cells
    assert np.max(np.abs(va - vc)) < 1e-12
    assert np.max(np.abs(vb - vc)) < 1e-12


def test_psd_projection_clips_negative_eigenvalues():
    m = np.diag([2.0, -1.0, 0.5])
    proj, n_clipped = _psd_project(m)
    assert n_clipped == 1
    assert np.allclose(proj, np.diag([2.0, 0.0, 0.5]))
    proj2, n2 = _psd_project(np.eye(3))
    assert n2 == 0 and np.array_equal(proj2, np.eye(3))


def test_naive_vcov_is_inverse_information():
    ds = crossed_dataset(seed=4)
    fit = fit_marginal_probit(ds)
    res = naive_vcov(fit.info, sigma2_a=0.5, sigma2_b=0.25)
    assert np.max(np.abs(res.vcov_gamma @ fit.info - np.eye(2))) < 1e-10
    assert np.allclose(res.vcov_beta, 1.75 * res.vcov_gamma)
    with pytest.raises(RankDeficiencyError):
        naive_vcov(np.zeros((2, 2)))


def test_vcov_beta_plugin_factor():
    v = np.array([[2.0, 0.1], [0.1, 1.0]])
    assert np.allclose(vcov_beta_plugin(v, 1.0, 0.5), 2.5 * v)


def test_pigeonhole_unit_weights_reproduce_point_estimate():
    ds = crossed_dataset(seed=5)
    fit = fit_arc(ds)
    res = pigeonhole_bootstrap(ds, fit, n_replicates=8, seed=0,
                               unit_weights=True)
    assert np.max(np.abs(res.vcov_gamma)) == 0.0
    # beta replicates agree to the last ulp; np.cov's mean subtraction can
    # leave rounding dust of order eps^2
    assert np.max(np.abs(res.se_beta)) < 1e-12
    assert res.n_dropped == 0


def test_pigeonhole_deterministic_across_jobs_and_reruns():
    ds = crossed_dataset(seed=6)
    fit = fit_arc(ds)
    a = pigeonhole_bootstrap(ds, fit, n_replicates=24, seed=11, n_jobs=1)
    b = pigeonhole_bootstrap(ds, fit, n_replicates=24, seed=11, n_jobs=4)
    assert np.array_equal(a.vcov_gamma, b.vcov_gamma)
    assert np.array_equal(a.se_beta, b.se_beta)
    c = pigeonhole_bootstrap(ds, fit, n_replicates=24, seed=12, n_jobs=1)
    assert not np.array_equal(a.vcov_gamma, c.vcov_gamma)


def test_pigeonhole_covers_crossed_dependence_better_than_naive():
    ds = crossed_dataset(n_rows=40, n_cols=30, fill=0.6, sigma_a=1.2,
                         sigma_b=0.8, seed=7)
    fit = fit_arc(ds)
    boot = pigeonhole_bootstrap(ds, fit, n_replicates=60, seed=3)
    naive = naive_vcov(fit.marginal.info, sigma2_a=fit.natural.sigma2_a,
                       sigma2_b=fit.natural.sigma2_b)
    # strong row/col effects: resampled spread must exceed the iid story
    assert boot.se_beta[0] > naive.se_beta[0]


def test_pigeonhole_full_mode_gives_sigma_spread():
    ds = crossed_dataset(n_rows=30, n_cols=25, fill=0.6, seed=8)
    fit = fit_arc(ds)
    res = pigeonhole_bootstrap(ds, fit, n_replicates=12, seed=1,
                               refit_mode="full")
    assert res.method == "pigeonhole"
    assert res.se_sigma_a is not None and res.se_sigma_a >= 0.0
    assert res.se_sigma_b is not None and np.isfinite(res.se_sigma_b)
    with pytest.raises(ValueError):
        pigeonhole_bootstrap(ds, fit, refit_mode="bogus")


def test_pigeonhole_error_when_too_many_replicates_fail():
    # row 0 carries no f1 variation; whenever the row multinomial lands all
    # weight on row 0 the refit is rank deficient and the replicate drops
    x = np.column_stack([np.ones(8), [0, 0, 0, 0, 1.0, -1.0, 0.5, -0.5]])
    y = np.array([1, 0, 1, 0, 1, 0, 0, 1], dtype=float)
    ds = from_cells(x, y, rows=[0, 0, 0, 0, 1, 1, 1, 1],
                    cols=[0, 1, 2, 3, 0, 1, 2, 3],
                    feature_names=["(intercept)", "f1"])
    ds.has_intercept = True
    fit = fit_arc(ds)
    with pytest.raises(BootstrapError):
        # P(all row weight on row 0) = 1/4 per replicate, so the failure
        # share sits above the 20% cutoff for this seed
        pigeonhole_bootstrap(ds, fit, n_replicates=40, seed=2)


def test_parametric_bootstrap_prices_sigma_uncertainty():
    ds = crossed_dataset(n_rows=30, n_cols=25, fill=0.6, seed=9)
    fit = fit_arc(ds)
    res = parametric_bootstrap(ds, fit.natural, n_replicates=10, seed=5)
    assert res.method == "parametric"
    assert res.se_sigma_a is not None and res.se_sigma_a > 0.0
    assert np.all(np.isfinite(res.se_beta))
    res2 = parametric_bootstrap(ds, fit.natural, n_replicates=10, seed=5)
    assert np.array_equal(res.vcov_beta, res2.vcov_beta)
