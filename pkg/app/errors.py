"""Exception hierarchy shared by every gelrelease stage."""

from __future__ import annotations


class GelReleaseError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class ConfigError(GelReleaseError, ValueError):
    """Invalid configuration document, parameter value or usage."""

    exit_code = 2

    def __init__(self, message: str, *, key: str | None = None) -> None:
        super().__init__(message)
        self.key = key


class EquilibriumError(GelReleaseError):
    """The equilibrium equation has no finite root for the given parameters."""


class GelSolverError(GelReleaseError):
    """The swelling integrator could not advance with an admissible step."""

    def __init__(self, message: str, *, t: float | None = None, dt: float | None = None, residual: float | None = None) -> None:
        super().__init__(message)
        self.t = t
        self.dt = dt
        self.residual = residual


class DrugLoadingError(GelReleaseError, ValueError):
    """Initial drug loading is negative, mis-sized or empty."""

    exit_code = 2


class ParameterMismatchError(GelReleaseError):
    """A precomputed artifact was built for different parameters."""


class GridMismatchError(GelReleaseError):
    """Two inputs live on different spatial or temporal grids."""


class ReleaseLevelError(GelReleaseError):
    """Requested release fraction is not reached within the horizon."""


class InfeasibleBudgetError(GelReleaseError):
    """Upper bounds cannot accommodate the drug budget."""


class CacheError(GelReleaseError):
    """A cache file is unreadable, from another format version or another digest."""
