"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see ``gcrmf.cli``): usage problems
exit 1, data problems exit 2, numeric problems exit 3.
"""


class GCRMFError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class DimensionError(GCRMFError, ValueError):
    """Shape or length mismatch."""

    exit_code = 3


class DomainError(GCRMFError, ValueError):
    """Argument outside its admissible domain."""


class MissingNodeError(GCRMFError, KeyError):
    """Reference to a node id that does not exist."""

    def __str__(self):
        return Exception.__str__(self)


class StateError(GCRMFError, RuntimeError):
    """Operation invalid for the current object state."""


class NumericError(GCRMFError, ArithmeticError):
    """Non-finite value encountered."""

    exit_code = 3


class FormatError(GCRMFError, ValueError):
    """File is truncated, corrupt or carries the wrong version header."""


class ParseError(FormatError):
    """Malformed row in a tabular input file."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if path is not None else ""
        super().__init__(where + message)


class IntegrityError(GCRMFError, ValueError):
    """Referential integrity violated (e.g. dangling edge endpoint)."""

    def __init__(self, message, offending=()):
        self.offending = list(offending)
        super().__init__(message)


class SpecError(GCRMFError, ValueError):
    """Invalid generator or run specification."""


class ConfigError(GCRMFError, ValueError):
    """Invalid or unreadable run configuration."""

    exit_code = 1


class BatchError(GCRMFError, ValueError):
    """Training batch cannot form the requested pairs."""


class OutOfOrderError(GCRMFError, ValueError):
    """Stream batch contains a timestamp older than the stream head."""


class EmptyNeighborhood(GCRMFError, LookupError):
    """Attention requested over an empty neighbor set."""


class NoSubgraph(GCRMFError, LookupError):
    """Every meta-path is empty for an anchor."""


class TrainingError(GCRMFError, ValueError):
    """Training precondition failed (e.g. a single label class)."""


class InputError(DomainError):
    """Prediction and truth do not describe the same node set."""
