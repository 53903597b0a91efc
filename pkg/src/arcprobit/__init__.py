"""Probit regression with two crossed Gaussian random effects in O(N) time.

The estimator combines a marginal probit stage with one hierarchical profile
search per grouping factor and inverts the three working parameters to the
natural scale. Uncertainty comes from a two-way cluster-robust sandwich or
from row/column (pigeonhole) and parametric bootstraps.
"""

__version__ = "0.1.0"

from .arc import ArcFit, NaturalParams, WorkingParams, fit_arc
from .baselines import full_loglik_bruteforce, laplace_fit, oracle_estimate
from .bench import BenchPlan, default_grid, mse_table, run_plan, slope_fit, timing_table
from .data import (
    SparseBinaryDataset,
    compute_stats,
    from_cells,
    from_frame,
    load_cache,
    load_csv,
    save_cache,
    save_csv,
)
from .errors import (
    ArcProbitError,
    BootstrapError,
    DensityError,
    NonConvergenceError,
    OptimizationError,
    ParseError,
    QuadratureUnderflowError,
    RankDeficiencyError,
    SchemaError,
    SeparationError,
    SizeGuardError,
)
from .estimator import CrossedProbitRegression
from .inference import (
    naive_vcov,
    parametric_bootstrap,
    pigeonhole_bootstrap,
    sandwich_vcov,
)
from .probit import fit_marginal_probit
from .simulate import PRESET_NAMES, SimSetting, generate, preset

__all__ = [
    "ArcFit",
    "ArcProbitError",
    "BenchPlan",
    "BootstrapError",
    "CrossedProbitRegression",
    "DensityError",
    "NaturalParams",
    "NonConvergenceError",
    "OptimizationError",
    "ParseError",
    "PRESET_NAMES",
    "QuadratureUnderflowError",
    "RankDeficiencyError",
    "SchemaError",
    "SeparationError",
    "SimSetting",
    "SizeGuardError",
    "SparseBinaryDataset",
    "WorkingParams",
    "__version__",
    "compute_stats",
    "default_grid",
    "fit_arc",
    "fit_marginal_probit",
    "from_cells",
    "from_frame",
    "full_loglik_bruteforce",
    "generate",
    "laplace_fit",
    "load_cache",
    "load_csv",
    "mse_table",
    "naive_vcov",
    "oracle_estimate",
    "parametric_bootstrap",
    "pigeonhole_bootstrap",
    "preset",
    "run_plan",
    "sandwich_vcov",
    "save_cache",
    "save_csv",
    "slope_fit",
    "timing_table",
]
