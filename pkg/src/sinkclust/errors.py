"""Exception types raised across the package."""


class SinkclustError(Exception):
    """Base class for all errors raised by sinkclust."""


class ShapeError(SinkclustError, ValueError):
    """Operand shapes do not agree."""


class ContractError(SinkclustError, ValueError):
    """A documented precondition was violated."""


class SizeError(ContractError):
    """Instance too large for an exhaustive routine."""


class NumericalInstabilityError(SinkclustError, ArithmeticError):
    """Standard-domain Sinkhorn produced non-finite scalings."""


class IdxFormatError(SinkclustError, ValueError):
    """Bad magic number or malformed IDX header."""


class IdxConsistencyError(SinkclustError, ValueError):
    """Image and label files disagree on the number of items."""


class IdxTruncatedError(SinkclustError, OSError):
    """IDX file ended before its declared payload."""
