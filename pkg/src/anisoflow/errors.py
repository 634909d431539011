"""Exception hierarchy shared by the library and the command line tool.

Each error class carries the process exit code the CLI maps it to, so the
mapping lives in one place.
"""


class AnisoflowError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(AnisoflowError):
    """Invalid or unreadable run configuration."""

    exit_code = 2


class ModelValidationError(AnisoflowError):
    """A user-supplied energy model violates a required identity."""

    exit_code = 2


class NonconvergenceError(AnisoflowError):
    """Newton iteration failed to reach its tolerances."""

    exit_code = 3

    def __init__(self, message, dx_norm=None, dmu_norm=None, iterations=None):
        super().__init__(message)
        self.dx_norm = dx_norm
        self.dmu_norm = dmu_norm
        self.iterations = iterations


class SolverError(AnisoflowError):
    """Linear algebra failure inside a solve (singular factorization)."""

    exit_code = 3


class StructureViolationError(AnisoflowError):
    """A conserved or monotone quantity moved beyond its guaranteed bound."""

    exit_code = 4


class TopologyError(AnisoflowError):
    """Mesh is not a closed, consistently oriented surface."""

    exit_code = 5


class GeometryError(AnisoflowError):
    """Degenerate or otherwise unusable geometry."""

    exit_code = 5
