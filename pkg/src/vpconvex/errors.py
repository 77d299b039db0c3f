"""Exception hierarchy shared by the solver modules.

The CLI maps each family onto an exit code, so new errors should subclass
one of ``ConfigError``, ``SolverError``, ``IntegrityError`` or
``NonConvergenceError``.
"""


class VPError(Exception):
    """Base class for all package errors."""


class ConfigError(VPError, ValueError):
    """Malformed or unknown configuration."""


class SolverError(VPError):
    """A numerical sub-solver failed."""


class IntegrityError(VPError):
    """An invariant of the discrete state was violated."""


class NonConvergenceError(VPError):
    """The outer fixed-point iteration did not reach tolerance."""


class DomainError(IntegrityError, ValueError):
    """A point lies outside the region where an operation is defined."""


class ChartSingularityError(DomainError):
    """Parameters fall inside the pole margin of a surface chart."""


class OutOfTubeError(DomainError):
    """Point is farther from the boundary than the tubular neighbourhood."""


class MetricDegeneracyError(DomainError):
    """The tube metric factor ``I - x_perp W`` is not positive definite."""


class GeometryConvergenceError(SolverError):
    """Nearest-boundary-point iteration failed to converge."""


class CompatibilityError(SolverError):
    """Neumann data is inconsistent with the total charge."""


class LinearSolveError(SolverError):
    """Linear solver failed to reach the requested residual."""


class GrazingCascadeError(IntegrityError):
    """Too many reflections inside one time step."""


class SingularSetError(IntegrityError):
    """A trajectory reached the grazing set where the invariant alpha vanishes."""


class HistoryError(IntegrityError):
    """A requested time lies outside a stored field history."""


class CorrespondenceError(IntegrityError):
    """Two marker collections do not share a marker labelling."""


class AdmissibilityError(IntegrityError):
    """Initial data is negative or otherwise inadmissible."""


class FlatnessError(IntegrityError):
    """Initial data is not flat near the grazing set."""


class NonComparableError(IntegrityError):
    """Simplex vertices crossed the boundary a different number of times."""


class DegenerateNormalizationError(IntegrityError):
    """A normalization would divide by zero."""


class OutOfRegimeError(IntegrityError):
    """Diagnostic preconditions (e.g. large velocities) are not met."""
