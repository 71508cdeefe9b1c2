"""Exception hierarchy shared across the package."""


class VfaMotionError(Exception):
    """Base class for all package errors."""


class GeometryError(VfaMotionError):
    """Invalid volume geometry (degenerate affine, bad dims, ...)."""


class GridMismatchError(GeometryError):
    """Operation received volumes that do not share one grid."""


class ConfigError(VfaMotionError):
    """Invalid or unknown configuration content."""


class SolverError(VfaMotionError):
    """Linear solve failed to converge within its budget.

    Carries a ``diagnostics`` dict (residual history, cycle counts) when
    raised by the multigrid solver.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FitError(VfaMotionError):
    """Generative model fit failed (bad inputs or inner solver failure)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
