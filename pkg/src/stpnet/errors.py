"""Exception hierarchy shared by every stpnet module."""


class StpnetError(Exception):
    """Base class for all errors raised by stpnet."""


class InvalidArgumentError(StpnetError, ValueError):
    """An argument has the wrong shape, range or type."""


class NumericError(StpnetError, ArithmeticError):
    """A NaN/Inf appeared, or a quantity that must be nonzero was zero."""


class ContractViolation(StpnetError, RuntimeError):
    """A caller broke a usage contract (e.g. backward twice on one graph)."""


class IntegrityError(StpnetError):
    """A persisted file failed its checksum or magic check."""


class VersionError(StpnetError):
    """A persisted file has an unsupported format version."""
