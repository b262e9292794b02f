"""Exception types shared across the toolkit."""


class DrmpcError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DrmpcError):
    """Matrix/vector dimensions inconsistent with the scenario's (n, m, q, N)."""


class ScenarioError(DrmpcError):
    """A scenario invariant failed validation (PSD, boundedness, schema, ...)."""


class InfeasibleStateError(DrmpcError):
    """The queried state lies outside the feasible set (Pi(x) is empty)."""


class SolverError(DrmpcError):
    """A QP/LP subproblem or the outer loop failed in a way the caller cannot ignore."""


class LineSearchError(SolverError):
    """Backtracking exceeded its budget; usually the inner-max tolerance is too loose."""
