"""Exception types shared across the package."""


class GridcoxError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(GridcoxError):
    """Malformed input data or configuration (CLI exit code 2)."""


class OutOfDomainError(GridcoxError):
    """A point falls outside the mesh domain."""


class ConvergenceError(GridcoxError):
    """An iterative solver failed to converge (CLI exit code 3)."""


class NoClosedFormError(GridcoxError):
    """Requested a covariance closed form that does not exist."""
