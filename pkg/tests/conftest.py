import numpy as np

from arcprobit.data import from_cells


def crossed_dataset(n_rows=25, n_cols=20, fill=0.6, sigma_a=1.0, sigma_b=0.5,
                    beta=(-0.5, 0.8), seed=0):
    """Small crossed layout generated straight from the latent model."""
    rng = np.random.default_rng(seed)
    mask = rng.random((n_rows, n_cols)) < fill
    rows, cols = np.nonzero(mask)
    n = rows.size
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    a = rng.normal(size=n_rows) * sigma_a
    b = rng.normal(size=n_cols) * sigma_b
    latent = x @ np.asarray(beta) + a[rows] + b[cols] + rng.normal(size=n)
    ds = from_cells(x, (latent > 0).astype(float), rows=rows, cols=cols,
                    n_rows=n_rows, n_cols=n_cols,
                    feature_names=["(intercept)", "f1"])
    ds.has_intercept = True
    return ds
