"""Exception types shared across the package."""


class MfnError(Exception):
    """Base class for all package errors."""


class FormatError(MfnError):
    """A data file is missing or malformed."""


class ConsistencyError(MfnError):
    """Cross-referenced records disagree (e.g. an edge spans two graphs)."""


class DegenerateGeometryError(MfnError):
    """Point geometry that breaks an operation (coincident nodes, zero bonds)."""


class PreconditionError(MfnError):
    """An operation was called with input violating its contract."""


class ShapeError(PreconditionError):
    """Array dimensions do not line up."""


class NumericalError(MfnError):
    """An iterative numerical routine failed to converge."""


class SingularMatrixError(NumericalError):
    """A linear system is singular to working precision."""


class PivotBreakdownError(NumericalError):
    """A factorization pivot fell below the breakdown threshold."""


class UnsupportedError(MfnError):
    """A requested feature is outside the supported scope."""


class UnsupportedBackendError(UnsupportedError):
    """The requested evaluation backend cannot serve this operation."""


class InternalError(MfnError):
    """Invariant violation inside the package; indicates a bug."""


class StratificationWarning(UserWarning):
    """Raised when stratified fold splitting falls back to unstratified."""
