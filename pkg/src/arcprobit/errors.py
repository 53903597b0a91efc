"""Exception types shared across the package.

The CLI maps these onto process exit codes: data/schema/guard problems exit 2,
detected separation exits 3, optimizer non-convergence exits 4.
"""


class ArcProbitError(Exception):
    """Base class for all package errors."""


class SchemaError(ArcProbitError):
    """Input table is missing a required column or has no data rows."""


class ParseError(ArcProbitError):
    """A cell value could not be parsed; message names the first offending line."""


class DensityError(ArcProbitError):
    """Requested cell density N/(R*C) exceeds 1, so the design is infeasible."""


class SizeGuardError(ArcProbitError):
    """A desk-scale baseline was asked to run beyond its size guard."""


class SeparationError(ArcProbitError):
    """Certified complete or quasi-complete separation; the MLE diverges."""

    def __init__(self, message, gamma=None):
        super().__init__(message)
        self.gamma = gamma


class NonConvergenceError(ArcProbitError):
    """Iteration cap reached without meeting the convergence tolerances."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class RankDeficiencyError(ArcProbitError):
    """Design matrix is numerically rank deficient; message names a column."""


class OptimizationError(ArcProbitError):
    """A 1-d search evaluated a non-finite objective; message gives the abscissa."""


class QuadratureUnderflowError(ArcProbitError):
    """All quadrature nodes of a cluster underflowed; message names the cluster."""


class BootstrapError(ArcProbitError):
    """Too many bootstrap replicates failed to refit."""
